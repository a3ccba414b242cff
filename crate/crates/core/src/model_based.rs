//! Exact-gradient actor-critic on a known model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VacError};
use crate::mdp::{
    apply_p_pi_transpose, argmax_row, discounted_generator, neg_entropy, objective_from_residual,
    reward_under_policy, solve, FiniteMdp, Policy, SoftmaxPolicy, StateDistribution, ValueVector,
};
use crate::params::{HyperParams, Variant};
use crate::trace::{policy_l1_error, value_linf_error, Reference, RunTrace, TraceRecord};

/// `||V||_inf` beyond which a run is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e12;
pub const DEFAULT_STRIDE: usize = 10;
pub const INIT_NOISE: f64 = 0.1;

/// Joint iterate `(V, theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MbState {
    pub v: ValueVector,
    pub theta: SoftmaxPolicy,
}

impl MbState {
    /// `V = 0` and the uniform policy.
    pub fn initial(n_states: usize, n_actions: usize) -> Self {
        MbState {
            v: DVector::zeros(n_states),
            theta: SoftmaxPolicy::uniform(n_states, n_actions),
        }
    }

    /// `V = 0` with logits drawn uniformly from `[-0.1, 0.1]`.
    pub fn perturbed(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = DMatrix::from_fn(n_states, n_actions, |_, _| rng.gen_range(-INIT_NOISE..=INIT_NOISE));
        MbState {
            v: DVector::zeros(n_states),
            theta: SoftmaxPolicy::new(logits).expect("bounded logits"),
        }
    }
}

/// Everything one update needs, evaluated at a single `(V, pi)`.
#[derive(Clone, Debug)]
pub(crate) struct Evaluation {
    pub g_v: DVector<f64>,
    pub g_theta: DMatrix<f64>,
}

/// Log-probabilities straight from logits, finite even where `pi` underflows.
pub(crate) fn log_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for s in 0..out.nrows() {
        let max = out.row(s).max();
        let lse = max + out.row(s).iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for a in 0..out.ncols() {
            out[(s, a)] -= lse;
        }
    }
    out
}

pub(crate) fn log_policy(pi: &Policy, lambda: f64) -> Result<DMatrix<f64>> {
    if lambda > 0.0 && pi.matrix().iter().any(|&p| p == 0.0) {
        return Err(VacError::invalid(
            "policy has zero-probability actions, so log pi is undefined for lambda > 0",
        ));
    }
    Ok(pi.matrix().map(|p| if p > 0.0 { p.ln() } else { 0.0 }))
}

pub(crate) fn evaluate(
    mdp: &FiniteMdp,
    v: &ValueVector,
    pi: &Policy,
    log_pi: &DMatrix<f64>,
    rho: &StateDistribution,
    beta: f64,
    lambda: f64,
    variant: Variant,
) -> Evaluation {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let q = mdp.lookahead(v);
    let ell = DVector::from_fn(n, |s, _| {
        let mut acc = v[s];
        for a in 0..m {
            let p = pi.prob(s, a);
            if p > 0.0 {
                acc -= p * (q[(s, a)] - lambda * log_pi[(s, a)]);
            }
        }
        acc
    });
    let w = rho.weights();
    let weighted: Vec<f64> = ell.iter().zip(w.iter()).map(|(l, r)| l * r).collect();
    let back = apply_p_pi_transpose(mdp, pi, &weighted);
    let g = mdp.gamma();
    let g_v = DVector::from_fn(n, |s, _| -w[s] + beta * (weighted[s] - g * back[s]));
    let g_theta = DMatrix::from_fn(n, m, |s, a| {
        let scale = beta * w[s] * variant.apply(ell[s]);
        if scale == 0.0 {
            0.0
        } else {
            scale * (-q[(s, a)] + lambda * log_pi[(s, a)])
        }
    });
    Evaluation { g_v, g_theta }
}

fn check_inputs(mdp: &FiniteMdp, v: &ValueVector, pi: &Policy, rho: &StateDistribution, params: &HyperParams) -> Result<()> {
    params.validate()?;
    mdp.check_values(v)?;
    mdp.check_policy(pi)?;
    if rho.len() != mdp.n_states() {
        return Err(VacError::shape("state distribution", mdp.n_states(), rho.len()));
    }
    Ok(())
}

/// `G_V = -rho + beta (I - gamma P^pi)^T (l ⊙ rho)`.
pub fn grad_v(
    mdp: &FiniteMdp,
    v: &ValueVector,
    pi: &Policy,
    rho: &StateDistribution,
    params: &HyperParams,
) -> Result<DVector<f64>> {
    check_inputs(mdp, v, pi, rho, params)?;
    let log_pi = log_policy(pi, params.lambda)?;
    Ok(evaluate(mdp, v, pi, &log_pi, rho, params.beta, params.lambda, Variant::Vanilla).g_v)
}

/// Natural policy direction `beta rho_s h(l_s) [-gamma (P^a V)_s - r_sa + lambda log pi_sa]`.
///
/// Row constants are dropped; they do not move a soft-max policy.
pub fn grad_theta(
    mdp: &FiniteMdp,
    v: &ValueVector,
    pi: &Policy,
    rho: &StateDistribution,
    params: &HyperParams,
    variant: Variant,
) -> Result<DMatrix<f64>> {
    check_inputs(mdp, v, pi, rho, params)?;
    let log_pi = log_policy(pi, params.lambda)?;
    Ok(evaluate(mdp, v, pi, &log_pi, rho, params.beta, params.lambda, variant).g_theta)
}

fn evaluate_state(mdp: &FiniteMdp, state: &MbState, rho: &StateDistribution, params: &HyperParams) -> (Policy, Evaluation) {
    let pi = state.theta.policy();
    let log_pi = log_softmax(state.theta.logits());
    let eval = evaluate(mdp, &state.v, &pi, &log_pi, rho, params.beta, params.lambda, params.variant);
    (pi, eval)
}

fn apply_update(state: &MbState, eval: &Evaluation, params: &HyperParams) -> Result<MbState> {
    let v = &state.v - &eval.g_v * params.eta_v;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(VacError::Numerical("non-finite value iterate".into()));
    }
    let mut theta = state.theta.clone();
    theta.descend(&(&eval.g_theta * params.eta_pi))?;
    Ok(MbState { v, theta })
}

fn check_state(mdp: &FiniteMdp, state: &MbState, rho: &StateDistribution, params: &HyperParams) -> Result<()> {
    params.validate()?;
    mdp.check_values(&state.v)?;
    if state.theta.logits().shape() != (mdp.n_states(), mdp.n_actions()) {
        return Err(VacError::shape(
            "logits",
            format!("{}x{}", mdp.n_states(), mdp.n_actions()),
            format!("{}x{}", state.theta.logits().nrows(), state.theta.logits().ncols()),
        ));
    }
    if rho.len() != mdp.n_states() {
        return Err(VacError::shape("state distribution", mdp.n_states(), rho.len()));
    }
    Ok(())
}

/// One joint update `V <- V - eta_V G_V`, `theta <- theta - eta_pi G_theta` using `params.variant`.
pub fn mb_step(state: &MbState, mdp: &FiniteMdp, rho: &StateDistribution, params: &HyperParams) -> Result<MbState> {
    check_state(mdp, state, rho, params)?;
    let (_, eval) = evaluate_state(mdp, state, rho, params);
    apply_update(state, &eval, params)
}

/// When a model-based run may stop before `max_iters`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopRule {
    /// Stop once `||G_V||_inf + ||G_theta - rowmean||_inf < tol`.
    pub tol: f64,
    /// Stop once the logit argmax agrees with the lookahead argmax and has stayed
    /// unchanged for this many iterations while `||G_V||_inf < value_tol`.
    pub greedy_window: Option<usize>,
    pub value_tol: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            tol: 1e-10,
            greedy_window: Some(1000),
            value_tol: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub max_iters: usize,
    /// Record every `stride`-th iteration; the last one is always recorded.
    pub stride: usize,
    pub stop: StopRule,
}

impl RunOptions {
    pub fn new(max_iters: usize) -> Self {
        RunOptions {
            max_iters,
            stride: DEFAULT_STRIDE,
            stop: StopRule::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Gradient,
    GreedyStable,
}

#[derive(Clone, Debug)]
pub struct MbRun {
    pub state: MbState,
    pub trace: RunTrace,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

/// Flat sparse copy of the model plus scratch buffers, so the hot loop never allocates.
struct Stepper<'a> {
    n: usize,
    m: usize,
    gamma: f64,
    rewards: Vec<f64>,
    offsets: Vec<usize>,
    succ: Vec<(usize, f64)>,
    rho: &'a [f64],
    rho_dist: &'a StateDistribution,
    params: HyperParams,
    v: Vec<f64>,
    logits: Vec<f64>,
    pi: Vec<f64>,
    log_pi: Vec<f64>,
    q: Vec<f64>,
    ell: Vec<f64>,
    weighted: Vec<f64>,
    back: Vec<f64>,
    g_v: Vec<f64>,
    g_theta: Vec<f64>,
    norms: Norms,
}

#[derive(Clone, Copy, Debug, Default)]
struct Norms {
    v_inf: f64,
    g_v_inf: f64,
    g_theta_centered_inf: f64,
    finite: bool,
}

impl<'a> Stepper<'a> {
    fn new(mdp: &FiniteMdp, rho: &'a StateDistribution, params: &HyperParams, init: &MbState) -> Self {
        let (n, m) = (mdp.n_states(), mdp.n_actions());
        let mut offsets = Vec::with_capacity(n * m + 1);
        let mut succ = Vec::new();
        let mut rewards = Vec::with_capacity(n * m);
        for s in 0..n {
            for a in 0..m {
                offsets.push(succ.len());
                succ.extend_from_slice(mdp.successors(s, a));
                rewards.push(mdp.reward(s, a));
            }
        }
        offsets.push(succ.len());
        let logits = (0..n * m).map(|i| init.theta.logits()[(i / m, i % m)]).collect();
        Stepper {
            n,
            m,
            gamma: mdp.gamma(),
            rewards,
            offsets,
            succ,
            rho: rho.weights().as_slice(),
            rho_dist: rho,
            params: *params,
            v: init.v.as_slice().to_vec(),
            logits,
            pi: vec![0.0; n * m],
            log_pi: vec![0.0; n * m],
            q: vec![0.0; n * m],
            ell: vec![0.0; n],
            weighted: vec![0.0; n],
            back: vec![0.0; n],
            g_v: vec![0.0; n],
            g_theta: vec![0.0; n * m],
            norms: Norms::default(),
        }
    }

    /// Fills every buffer from the current `(V, theta)` and refreshes the norms.
    fn evaluate(&mut self) {
        let (n, m) = (self.n, self.m);
        let HyperParams { beta, lambda, variant, .. } = self.params;
        let gamma = self.gamma;
        let (v, succ, offsets) = (&self.v[..n], &self.succ[..], &self.offsets[..n * m + 1]);
        let (logits, rewards) = (&self.logits[..n * m], &self.rewards[..n * m]);
        let (pi, log_pi, q) = (&mut self.pi[..n * m], &mut self.log_pi[..n * m], &mut self.q[..n * m]);
        let (ell, weighted, rho) = (&mut self.ell[..n], &mut self.weighted[..n], &self.rho[..n]);
        let mut v_inf = 0.0f64;
        let mut finite = true;
        for s in 0..n {
            let base = s * m;
            let mut max = f64::NEG_INFINITY;
            for i in base..base + m {
                max = max.max(logits[i]);
            }
            let mut z = 0.0;
            for i in base..base + m {
                let x = logits[i] - max;
                let e = if x == 0.0 { 1.0 } else { x.exp() };
                pi[i] = e;
                z += e;
            }
            let shift = if lambda > 0.0 { max + z.ln() } else { 0.0 };
            let inv_z = 1.0 / z;
            let mut acc = v[s];
            for i in base..base + m {
                let p = pi[i] * inv_z;
                pi[i] = p;
                let lp = if lambda > 0.0 { logits[i] - shift } else { 0.0 };
                log_pi[i] = lp;
                let mut next = 0.0;
                for &(t, w) in &succ[offsets[i]..offsets[i + 1]] {
                    next += w * v[t];
                }
                let qi = rewards[i] + gamma * next;
                q[i] = qi;
                if p > 0.0 {
                    acc -= p * (qi - lambda * lp);
                }
            }
            ell[s] = acc;
            weighted[s] = acc * rho[s];
            v_inf = v_inf.max(v[s].abs());
            finite &= acc.is_finite();
        }
        let back = &mut self.back[..n];
        back.fill(0.0);
        for s in 0..n {
            let ws = weighted[s];
            if ws == 0.0 {
                continue;
            }
            for i in s * m..(s + 1) * m {
                let w = pi[i] * ws;
                if w == 0.0 {
                    continue;
                }
                for &(t, p) in &succ[offsets[i]..offsets[i + 1]] {
                    back[t] += w * p;
                }
            }
        }
        let (g_v, g_theta) = (&mut self.g_v[..n], &mut self.g_theta[..n * m]);
        let mut g_v_inf = 0.0f64;
        let mut g_theta_inf = 0.0f64;
        let inv_m = 1.0 / m as f64;
        for s in 0..n {
            let g = -rho[s] + beta * (weighted[s] - gamma * back[s]);
            g_v[s] = g;
            g_v_inf = g_v_inf.max(g.abs());
            let scale = beta * rho[s] * variant.apply(ell[s]);
            let row = &mut g_theta[s * m..(s + 1) * m];
            if scale == 0.0 {
                row.fill(0.0);
                continue;
            }
            let mut mean = 0.0;
            for (a, g) in row.iter_mut().enumerate() {
                let i = s * m + a;
                *g = scale * (lambda * log_pi[i] - q[i]);
                mean += *g;
            }
            mean *= inv_m;
            for g in row.iter() {
                g_theta_inf = g_theta_inf.max((g - mean).abs());
            }
        }
        self.norms = Norms {
            v_inf,
            g_v_inf,
            g_theta_centered_inf: g_theta_inf,
            finite,
        };
    }

    fn update(&mut self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let (eta_v, eta_pi) = (self.params.eta_v, self.params.eta_pi);
        let mut finite = true;
        let (v, g_v) = (&mut self.v[..n], &self.g_v[..n]);
        for s in 0..n {
            v[s] -= eta_v * g_v[s];
            finite &= v[s].is_finite();
        }
        let (logits, g_theta) = (&mut self.logits[..n * m], &self.g_theta[..n * m]);
        for s in 0..n {
            let row = &mut logits[s * m..(s + 1) * m];
            let grow = &g_theta[s * m..(s + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for a in 0..m {
                row[a] -= eta_pi * grow[a];
                max = max.max(row[a]);
            }
            finite &= max.is_finite();
            for x in row.iter_mut() {
                *x -= max;
            }
        }
        if !finite {
            return Err(VacError::Numerical("non-finite iterate".into()));
        }
        Ok(())
    }

    fn argmax(row: &[f64]) -> usize {
        let mut best = 0;
        for (a, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = a;
            }
        }
        best
    }

    /// Writes the logit argmax into `out` and reports whether it equals the lookahead argmax.
    fn greedy_into(&self, out: &mut [usize]) -> bool {
        let m = self.m;
        let mut consistent = true;
        for s in 0..self.n {
            out[s] = Self::argmax(&self.logits[s * m..(s + 1) * m]);
            consistent &= out[s] == Self::argmax(&self.q[s * m..(s + 1) * m]);
        }
        consistent
    }

    fn value_vector(&self) -> ValueVector {
        DVector::from_column_slice(&self.v)
    }

    fn policy(&self) -> Policy {
        Policy(DMatrix::from_row_slice(self.n, self.m, &self.pi))
    }

    fn state(&self) -> MbState {
        MbState {
            v: self.value_vector(),
            theta: SoftmaxPolicy::new(DMatrix::from_row_slice(self.n, self.m, &self.logits)).expect("finite logits"),
        }
    }

    fn record(&self, iter: usize, reference: &Reference) -> TraceRecord {
        let v = self.value_vector();
        let ell = DVector::from_column_slice(&self.ell);
        let min_residual = ell.min();
        TraceRecord {
            iter,
            l1_policy_error: policy_l1_error(&self.policy(), &reference.pi_star).unwrap_or(f64::NAN),
            linf_value_error: value_linf_error(&v, &reference.v_star),
            min_residual,
            objective: objective_from_residual(&v, &ell, self.rho_dist, self.params.beta),
            negative_residual: min_residual < 0.0,
            samples_consumed: 0,
        }
    }
}

/// Iterates [`mb_step`] from `init`, recording metrics against `reference`.
///
/// Record `k` describes the iterate after `k` updates; the initial iterate goes to `trace.initial`.
pub fn run_model_based(
    mdp: &FiniteMdp,
    rho: &StateDistribution,
    params: &HyperParams,
    init: MbState,
    options: &RunOptions,
    reference: &Reference,
) -> Result<MbRun> {
    if options.max_iters == 0 {
        return Err(VacError::invalid("max_iters must be at least 1"));
    }
    if options.stride == 0 {
        return Err(VacError::invalid("recording stride must be at least 1"));
    }
    check_state(mdp, &init, rho, params)?;
    mdp.check_policy(&reference.pi_star)?;
    mdp.check_values(&reference.v_star)?;

    let mut stepper = Stepper::new(mdp, rho, params, &init);
    let mut trace = RunTrace::default();
    let mut greedy = vec![usize::MAX; mdp.n_states()];
    let mut current = vec![0usize; mdp.n_states()];
    let mut stable_for = 0usize;
    let mut k = 0usize;
    loop {
        stepper.evaluate();
        if k == 0 {
            trace.initial = Some(stepper.record(0, reference));
        }
        if stepper.norms.v_inf > DIVERGENCE_BOUND || !stepper.norms.finite {
            if k > 0 {
                trace.push(stepper.record(k, reference));
            }
            return Err(VacError::Divergence {
                iteration: k,
                reason: format!("||V||_inf exceeded {DIVERGENCE_BOUND:e}"),
                trace: Box::new(trace),
            });
        }

        let gv_norm = stepper.norms.g_v_inf;
        let mut reason = None;
        if k == options.max_iters {
            reason = Some(StopReason::MaxIters);
        } else if gv_norm + stepper.norms.g_theta_centered_inf < options.stop.tol {
            reason = Some(StopReason::Gradient);
        } else if let Some(window) = options.stop.greedy_window {
            let consistent = stepper.greedy_into(&mut current);
            if consistent && current == greedy {
                stable_for += 1;
            } else {
                stable_for = 0;
            }
            std::mem::swap(&mut greedy, &mut current);
            if stable_for >= window && gv_norm < options.stop.value_tol {
                reason = Some(StopReason::GreedyStable);
            }
        }

        if k > 0 && (k.is_multiple_of(options.stride) || reason.is_some()) {
            trace.push(stepper.record(k, reference));
        }
        if let Some(stop_reason) = reason {
            return Ok(MbRun {
                state: stepper.state(),
                trace,
                iterations: k,
                stop_reason,
            });
        }

        if let Err(e) = stepper.update() {
            return Err(VacError::Divergence {
                iteration: k + 1,
                reason: e.to_string(),
                trace: Box::new(trace),
            });
        }
        k += 1;
    }
}


/// Residual at a point where `G_V = 0`: `(1/beta) rho~ ⊙ (I - gamma P^pi)^{-T} rho`.
pub fn stationary_residual(mdp: &FiniteMdp, pi: &Policy, rho: &StateDistribution, beta: f64) -> Result<DVector<f64>> {
    let a = discounted_generator(mdp, pi)?;
    let y = solve(a.transpose(), rho.weights(), "transposed generator")?;
    Ok(y.component_mul(&rho.reciprocal()) / beta)
}

/// The value vector solving `G_V(V, pi) = 0` for a fixed policy.
pub fn fixed_point_values(mdp: &FiniteMdp, pi: &Policy, rho: &StateDistribution, params: &HyperParams) -> Result<ValueVector> {
    params.validate()?;
    mdp.check_policy(pi)?;
    if rho.len() != mdp.n_states() {
        return Err(VacError::shape("state distribution", mdp.n_states(), rho.len()));
    }
    let ell = stationary_residual(mdp, pi, rho, params.beta)?;
    let rhs = reward_under_policy(mdp, pi)? - neg_entropy(pi) * params.lambda + ell;
    solve(discounted_generator(mdp, pi)?, &rhs, "stationary values")
}

/// `||l(V, pi) - (1/beta) rho~ ⊙ (I - gamma P^pi)^{-T} rho||_inf`, zero exactly when `G_V = 0`.
pub fn fixed_point_residual_gap(
    mdp: &FiniteMdp,
    v: &ValueVector,
    pi: &Policy,
    rho: &StateDistribution,
    params: &HyperParams,
) -> Result<f64> {
    check_inputs(mdp, v, pi, rho, params)?;
    let ell = crate::mdp::residual_unchecked(mdp, v, pi, params.lambda);
    let target = stationary_residual(mdp, pi, rho, params.beta)?;
    Ok((ell - target).amax())
}

impl SoftmaxPolicy {
    /// Per-state argmax of the logits (lowest index on ties).
    pub fn policy_greedy(&self) -> Vec<usize> {
        (0..self.logits().nrows()).map(|s| argmax_row(self.logits(), s)).collect()
    }
}
