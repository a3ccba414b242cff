//! Finite discounted MDPs, soft-max policies and the Bellman algebra.
//!
//! Conventions used throughout the crate:
//!
//! * `P^a` is stored per action as a dense `n x n` row-stochastic matrix, with
//!   a sparse copy of each row for the hot loops.
//! * `H(pi)_s = sum_a pi_sa log pi_sa` is the *negative* entropy (so `H <= 0`),
//!   with `0 log 0 = 0`.
//! * `||x||_rho^2 = sum_s rho_s x_s^2`, no normalization by the state count.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VacError};

pub type ValueVector = DVector<f64>;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transitions: Vec<DMatrix<f64>>,
    rewards: DMatrix<f64>,
    // successors[a][s] = nonzero entries of row s of P^a
    successors: Vec<Vec<Vec<(usize, f64)>>>,
}

impl FiniteMdp {
    /// Builds an MDP from per-action transition matrices and an
    /// `n_states x n_actions` reward table.
    pub fn new(transitions: Vec<DMatrix<f64>>, rewards: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n_actions = transitions.len();
        if n_actions == 0 {
            return Err(VacError::invalid("an MDP needs at least one action"));
        }
        let n_states = transitions[0].nrows();
        if n_states == 0 {
            return Err(VacError::invalid("an MDP needs at least one state"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(VacError::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        if rewards.shape() != (n_states, n_actions) {
            return Err(VacError::shape(
                "rewards",
                format!("{n_states}x{n_actions}"),
                format!("{}x{}", rewards.nrows(), rewards.ncols()),
            ));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(VacError::invalid(format!("non-finite reward {r}")));
        }
        let mut successors = Vec::with_capacity(n_actions);
        for (a, p) in transitions.iter().enumerate() {
            if p.shape() != (n_states, n_states) {
                return Err(VacError::shape(
                    "transition matrix",
                    format!("{n_states}x{n_states}"),
                    format!("{}x{}", p.nrows(), p.ncols()),
                ));
            }
            let mut rows = Vec::with_capacity(n_states);
            for s in 0..n_states {
                let mut sum = 0.0;
                let mut row = Vec::new();
                for t in 0..n_states {
                    let x = p[(s, t)];
                    if !(0.0..=1.0).contains(&x) {
                        return Err(VacError::invalid(format!(
                            "P[{a}][{s},{t}] = {x} is not a probability"
                        )));
                    }
                    if x > 0.0 {
                        row.push((t, x));
                    }
                    sum += x;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(VacError::invalid(format!(
                        "row {s} of P[{a}] sums to {sum}, not 1"
                    )));
                }
                rows.push(row);
            }
            successors.push(rows);
        }
        Ok(FiniteMdp {
            n_states,
            n_actions,
            gamma,
            transitions,
            rewards,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.transitions[action]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    pub fn rewards(&self) -> &DMatrix<f64> {
        &self.rewards
    }

    #[inline]
    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[(state, action)]
    }

    /// Nonzero entries `(next_state, probability)` of row `state` of `P^action`.
    #[inline]
    pub fn successors(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.successors[action][state]
    }

    /// `sum_t P^a_{st} v_t`.
    #[inline]
    pub fn expected_next(&self, state: usize, action: usize, v: &[f64]) -> f64 {
        self.successors[action][state]
            .iter()
            .map(|&(t, p)| p * v[t])
            .sum()
    }

    /// One-step lookahead table `r_sa + gamma sum_t P^a_st v_t`.
    pub fn lookahead(&self, v: &ValueVector) -> DMatrix<f64> {
        let v = v.as_slice();
        DMatrix::from_fn(self.n_states, self.n_actions, |s, a| {
            self.rewards[(s, a)] + self.gamma * self.expected_next(s, a, v)
        })
    }

    /// Draws a successor of `(state, action)` by inverting the row CDF at `u in [0,1)`.
    pub fn sample_next(&self, state: usize, action: usize, u: f64) -> usize {
        let row = &self.successors[action][state];
        let mut acc = 0.0;
        for &(t, p) in row {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.last().map(|&(t, _)| t).unwrap_or(state)
    }

    /// True when every `P^a` row has a single successor.
    pub fn is_deterministic(&self) -> bool {
        self.successors.iter().flatten().all(|row| row.len() == 1)
    }

    pub(crate) fn check_values(&self, v: &ValueVector) -> Result<()> {
        if v.len() != self.n_states {
            return Err(VacError::shape("value vector", self.n_states, v.len()));
        }
        Ok(())
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        if pi.shape() != (self.n_states, self.n_actions) {
            return Err(VacError::shape(
                "policy",
                format!("{}x{}", self.n_states, self.n_actions),
                format!("{}x{}", pi.n_states(), pi.n_actions()),
            ));
        }
        Ok(())
    }
}

/// A row-stochastic `n_states x n_actions` policy matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy(pub(crate) DMatrix<f64>);

impl Policy {
    /// Validates non-negativity and unit row sums (within `1e-10`).
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row = probs.row(s);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(VacError::invalid(format!("row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(VacError::invalid(format!("row {s} sums to {sum}, not 1")));
            }
        }
        Ok(Policy(probs))
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy(DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64))
    }

    /// One-hot policy picking `actions[s]` at each state.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut m = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            m[(s, a)] = 1.0;
        }
        Policy(m)
    }

    pub fn n_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    #[inline]
    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.0[(state, action)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Per-state argmax with lowest-index tie-breaking.
    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states()).map(|s| argmax_row(&self.0, s)).collect()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&p| p > 0.0)
    }
}

/// First index of the row maximum.
pub fn argmax_row(m: &DMatrix<f64>, row: usize) -> usize {
    let mut best = 0;
    for a in 1..m.ncols() {
        if m[(row, a)] > m[(row, best)] {
            best = a;
        }
    }
    best
}

/// Logit table `theta` whose row soft-max is the policy.
///
/// Rows are kept shifted so that `max_a theta_sa = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPolicy {
    logits: DMatrix<f64>,
}

impl SoftmaxPolicy {
    pub fn new(logits: DMatrix<f64>) -> Result<Self> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(VacError::invalid("logits must be finite"));
        }
        let mut logits = logits;
        shift_rows(&mut logits);
        Ok(SoftmaxPolicy { logits })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        SoftmaxPolicy {
            logits: DMatrix::zeros(n_states, n_actions),
        }
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    pub fn policy(&self) -> Policy {
        Policy(softmax_rows(&self.logits))
    }

    /// `theta <- theta - step`, followed by the row re-shift.
    pub fn descend(&mut self, step: &DMatrix<f64>) -> Result<()> {
        self.logits -= step;
        if self.logits.iter().any(|x| !x.is_finite()) {
            return Err(VacError::Numerical("non-finite logits after update".into()));
        }
        shift_rows(&mut self.logits);
        Ok(())
    }
}

fn shift_rows(logits: &mut DMatrix<f64>) {
    for s in 0..logits.nrows() {
        let max = logits.row(s).max();
        for a in 0..logits.ncols() {
            logits[(s, a)] -= max;
        }
    }
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for s in 0..out.nrows() {
        let max = out.row(s).max();
        let mut z = 0.0;
        for a in 0..out.ncols() {
            let e = (out[(s, a)] - max).exp();
            out[(s, a)] = e;
            z += e;
        }
        for a in 0..out.ncols() {
            out[(s, a)] /= z;
        }
    }
    out
}

/// Row-wise soft-max of a logit table, stable for large logits.
pub fn policy_from_logits(logits: &DMatrix<f64>) -> Result<Policy> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(VacError::invalid("logits must be finite"));
    }
    if logits.ncols() == 0 {
        return Err(VacError::invalid("logit table has no actions"));
    }
    Ok(Policy(softmax_rows(logits)))
}

/// A strictly positive distribution over states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDistribution(DVector<f64>);

impl StateDistribution {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(VacError::invalid("empty state distribution"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(VacError::invalid("state weights must be strictly positive"));
        }
        let sum = weights.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(VacError::invalid(format!("state weights sum to {sum}, not 1")));
        }
        Ok(StateDistribution(weights))
    }

    pub fn uniform(n_states: usize) -> Self {
        StateDistribution(DVector::from_element(n_states, 1.0 / n_states as f64))
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.min()
    }

    /// Element-wise reciprocal `1/rho_s`.
    pub fn reciprocal(&self) -> DVector<f64> {
        self.0.map(|w| 1.0 / w)
    }
}

/// `P^pi_st = sum_a pi_sa P^a_st`.
pub fn transition_under_policy(mdp: &FiniteMdp, pi: &Policy) -> Result<DMatrix<f64>> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states();
    let mut out = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for &(t, p) in mdp.successors(s, a) {
                out[(s, t)] += w * p;
            }
        }
    }
    Ok(out)
}

/// `r^pi_s = sum_a r_sa pi_sa`.
pub fn reward_under_policy(mdp: &FiniteMdp, pi: &Policy) -> Result<DVector<f64>> {
    mdp.check_policy(pi)?;
    Ok(DVector::from_fn(mdp.n_states(), |s, _| {
        (0..mdp.n_actions()).map(|a| mdp.reward(s, a) * pi.prob(s, a)).sum()
    }))
}

/// Negative entropy `H(pi_s) = sum_a pi_sa log pi_sa`, with `0 log 0 = 0`.
pub fn neg_entropy(pi: &Policy) -> DVector<f64> {
    DVector::from_fn(pi.n_states(), |s, _| row_neg_entropy(pi, s))
}

#[inline]
pub(crate) fn row_neg_entropy(pi: &Policy, s: usize) -> f64 {
    (0..pi.n_actions())
        .map(|a| {
            let p = pi.prob(s, a);
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// `((P^pi)^T x)_t`.
pub(crate) fn apply_p_pi_transpose(mdp: &FiniteMdp, pi: &Policy, x: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(mdp.n_states());
    for s in 0..mdp.n_states() {
        if x[s] == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions() {
            let w = pi.prob(s, a) * x[s];
            if w == 0.0 {
                continue;
            }
            for &(t, p) in mdp.successors(s, a) {
                out[t] += w * p;
            }
        }
    }
    out
}

/// `I - gamma P^pi` as a dense matrix.
pub fn discounted_generator(mdp: &FiniteMdp, pi: &Policy) -> Result<DMatrix<f64>> {
    let p = transition_under_policy(mdp, pi)?;
    let n = mdp.n_states();
    Ok(DMatrix::identity(n, n) - p * mdp.gamma())
}

pub(crate) fn solve(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = a
        .lu()
        .solve(b)
        .ok_or_else(|| VacError::Numerical(format!("singular system while solving {what}")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(VacError::Numerical(format!("non-finite solution for {what}")));
    }
    Ok(x)
}

/// Regularized policy value `V^pi_lambda = (I - gamma P^pi)^{-1} (r^pi - lambda H(pi))`.
pub fn policy_value(mdp: &FiniteMdp, pi: &Policy, lambda: f64) -> Result<ValueVector> {
    if !(lambda >= 0.0) {
        return Err(VacError::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let a = discounted_generator(mdp, pi)?;
    let rhs = reward_under_policy(mdp, pi)? - neg_entropy(pi) * lambda;
    solve(a, &rhs, "policy evaluation")
}

/// Bellman residual `l(V, pi) = (I - gamma P^pi) V - r^pi + lambda H(pi)`.
pub fn bellman_residual(mdp: &FiniteMdp, v: &ValueVector, pi: &Policy, lambda: f64) -> Result<DVector<f64>> {
    mdp.check_values(v)?;
    mdp.check_policy(pi)?;
    Ok(residual_unchecked(mdp, v, pi, lambda))
}

pub(crate) fn residual_unchecked(mdp: &FiniteMdp, v: &ValueVector, pi: &Policy, lambda: f64) -> DVector<f64> {
    let g = mdp.gamma();
    let vs = v.as_slice();
    DVector::from_fn(mdp.n_states(), |s, _| {
        let mut acc = v[s];
        for a in 0..mdp.n_actions() {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            acc -= p * (mdp.reward(s, a) + g * mdp.expected_next(s, a, vs));
            if lambda != 0.0 {
                acc += lambda * p * p.ln();
            }
        }
        acc
    })
}

/// Variational objective `E(V, pi) = -rho^T V + (beta/2) ||l(V, pi)||_rho^2`.
///
/// `beta = 0` is accepted here so the first term can be checked in isolation.
pub fn objective(
    mdp: &FiniteMdp,
    v: &ValueVector,
    pi: &Policy,
    rho: &StateDistribution,
    beta: f64,
    lambda: f64,
) -> Result<f64> {
    if rho.len() != mdp.n_states() {
        return Err(VacError::shape("state distribution", mdp.n_states(), rho.len()));
    }
    if !(beta >= 0.0) {
        return Err(VacError::invalid(format!("beta must be non-negative, got {beta}")));
    }
    let ell = bellman_residual(mdp, v, pi, lambda)?;
    Ok(objective_from_residual(v, &ell, rho, beta))
}

pub(crate) fn objective_from_residual(v: &ValueVector, ell: &DVector<f64>, rho: &StateDistribution, beta: f64) -> f64 {
    let w = rho.weights();
    let linear = -w.dot(v);
    let quad: f64 = ell.iter().zip(w.iter()).map(|(l, r)| r * l * l).sum();
    linear + 0.5 * beta * quad
}
