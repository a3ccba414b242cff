//! Stochastic actor-critic trained from one off-policy trajectory.
//!
//! The Q-formulation needs no importance weights. The V-formulation reweights
//! every term that depends on the sampled action by `tau = pi / pi_b`.

use std::fmt::{self, Write as _};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VacError};
use crate::instances::{mdp_fingerprint, StateGeometry};
use crate::mdp::{FiniteMdp, Policy, SoftmaxPolicy, ValueVector};
use crate::model_based::{log_policy, log_softmax, DIVERGENCE_BOUND};
use crate::params::{HyperParams, Variant};
use crate::trace::{policy_l1_error, value_linf_error, Reference, RunTrace, TraceRecord};

pub type QTable = DMatrix<f64>;

/// Where the second, independent next state comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NextStateMode {
    /// Reuse `s_{t+1}`; unbiased only for deterministic dynamics.
    Exact,
    /// Borrow the noise of the following step, keeping the drift of `a_t`.
    Bff,
    /// Draw a fresh sample from the simulator.
    Resample,
}

impl NextStateMode {
    pub fn name(self) -> &'static str {
        match self {
            NextStateMode::Exact => "exact",
            NextStateMode::Bff => "bff",
            NextStateMode::Resample => "resample",
        }
    }
}

impl fmt::Display for NextStateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NextStateMode {
    type Err = VacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(NextStateMode::Exact),
            "bff" => Ok(NextStateMode::Bff),
            "resample" => Ok(NextStateMode::Resample),
            other => Err(VacError::invalid(format!("unknown next-state mode `{other}`"))),
        }
    }
}

/// Off-policy rollout `(s_t, a_t, r_t)` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub behavior: Policy,
    pub seed: u64,
    pub mdp_hash: String,
}

impl Trajectory {
    /// The final time index `T`.
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Number of usable samples: `t = 0..=T-2`, so every sample has `s_{t+2}`.
    pub fn usable(&self) -> usize {
        self.states.len().saturating_sub(2)
    }

    fn check_window(&self, window: &Range<usize>) -> Result<()> {
        if window.start >= window.end {
            return Err(VacError::invalid("empty sample window"));
        }
        if window.end > self.usable() {
            return Err(VacError::TrajectoryExhausted {
                needed: window.end,
                available: self.usable(),
            });
        }
        Ok(())
    }

    /// Checks indices against `mdp` and that every reward equals `r(s_t, a_t)`.
    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        let len = self.states.len();
        if self.actions.len() != len || self.rewards.len() != len {
            return Err(VacError::invalid("trajectory columns have different lengths"));
        }
        if len < 3 {
            return Err(VacError::invalid("trajectory needs T >= 2"));
        }
        mdp.check_policy(&self.behavior)?;
        for t in 0..len {
            let (s, a) = (self.states[t], self.actions[t]);
            if s >= mdp.n_states() || a >= mdp.n_actions() {
                return Err(VacError::invalid(format!("step {t}: state or action out of range")));
            }
            if self.rewards[t] != mdp.reward(s, a) {
                return Err(VacError::invalid(format!("step {t}: reward does not match the model")));
            }
        }
        Ok(())
    }

    /// Delimited text: `#` header lines, then `t,s,a,r` rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# vac trajectory v1");
        let _ = writeln!(out, "# mdp_hash {}", self.mdp_hash);
        let _ = writeln!(out, "# seed {}", self.seed);
        let probs: Vec<String> = (0..self.behavior.n_states())
            .flat_map(|s| (0..self.behavior.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| format!("{:?}", self.behavior.prob(s, a)))
            .collect();
        let _ = writeln!(
            out,
            "# behavior {} {} {}",
            self.behavior.n_states(),
            self.behavior.n_actions(),
            probs.join(" ")
        );
        let _ = writeln!(out, "t,s,a,r");
        for t in 0..self.states.len() {
            let _ = writeln!(out, "{},{},{},{:?}", t, self.states[t], self.actions[t], self.rewards[t]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| VacError::Parse { line, message };
        let mut mdp_hash = None;
        let mut seed = None;
        let mut behavior = None;
        let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.split_whitespace();
                match parts.next() {
                    Some("mdp_hash") => mdp_hash = parts.next().map(str::to_string),
                    Some("seed") => {
                        seed = Some(
                            parts
                                .next()
                                .unwrap_or("")
                                .parse::<u64>()
                                .map_err(|e| parse_err(no, format!("seed: {e}")))?,
                        )
                    }
                    Some("behavior") => {
                        let nums: Vec<&str> = parts.collect();
                        let dims = |k: usize| -> Result<usize> {
                            nums.get(k)
                                .ok_or_else(|| parse_err(no, "behavior: missing dimensions".into()))?
                                .parse::<usize>()
                                .map_err(|e| parse_err(no, format!("behavior: {e}")))
                        };
                        let (n, m) = (dims(0)?, dims(1)?);
                        let vals = nums[2..]
                            .iter()
                            .map(|x| x.parse::<f64>().map_err(|e| parse_err(no, format!("behavior: {e}"))))
                            .collect::<Result<Vec<_>>>()?;
                        if vals.len() != n * m {
                            return Err(parse_err(no, format!("behavior: expected {} probabilities", n * m)));
                        }
                        behavior = Some(Policy::new(DMatrix::from_row_slice(n, m, &vals))?);
                    }
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                if line != "t,s,a,r" {
                    return Err(parse_err(no, format!("expected header `t,s,a,r`, found `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(parse_err(no, format!("expected 4 columns, found {}", cols.len())));
            }
            let t: usize = cols[0].parse().map_err(|e| parse_err(no, format!("t: {e}")))?;
            if t != states.len() {
                return Err(parse_err(no, format!("expected t = {}, found {t}", states.len())));
            }
            states.push(cols[1].parse().map_err(|e| parse_err(no, format!("s: {e}")))?);
            actions.push(cols[2].parse().map_err(|e| parse_err(no, format!("a: {e}")))?);
            rewards.push(cols[3].parse().map_err(|e| parse_err(no, format!("r: {e}")))?);
        }
        let missing = |what: &str| parse_err(0, format!("missing `{what}` header line"));
        Ok(Trajectory {
            states,
            actions,
            rewards,
            behavior: behavior.ok_or_else(|| missing("behavior"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            mdp_hash: mdp_hash.ok_or_else(|| missing("mdp_hash"))?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn sample_action(pi: &Policy, s: usize, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for a in 0..pi.n_actions() {
        let p = pi.prob(s, a);
        if p > 0.0 {
            last = a;
            acc += p;
            if u < acc {
                return a;
            }
        }
    }
    last
}

fn check_behavior(mdp: &FiniteMdp, behavior: &Policy) -> Result<()> {
    mdp.check_policy(behavior)?;
    if !behavior.is_strictly_positive() {
        return Err(VacError::invalid(
            "behavior policy must be strictly positive so importance ratios stay bounded",
        ));
    }
    Ok(())
}

/// Seeded rollout from a uniformly drawn initial state; `horizon` is the final index `T`.
pub fn generate_trajectory(mdp: &FiniteMdp, behavior: &Policy, horizon: usize, seed: u64) -> Result<Trajectory> {
    if horizon < 2 {
        return Err(VacError::invalid(format!("trajectory horizon must be at least 2, got {horizon}")));
    }
    check_behavior(mdp, behavior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = rng.gen_range(0..mdp.n_states());
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon + 1);
    let mut rewards = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let a = sample_action(behavior, s, rng.gen());
        states.push(s);
        actions.push(a);
        rewards.push(mdp.reward(s, a));
        if t < horizon {
            s = mdp.sample_next(s, a, rng.gen());
        }
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
        behavior: behavior.clone(),
        seed,
        mdp_hash: mdp_fingerprint(mdp),
    })
}

/// BFF surrogate for `(s_t, a_t)`, see [`StateGeometry::borrow_noise`].
pub fn bff_next_state(traj: &Trajectory, geometry: &StateGeometry, t: usize) -> Result<usize> {
    if t + 2 > traj.horizon() {
        return Err(VacError::invalid(format!(
            "BFF needs t <= T - 2 (t = {t}, T = {})",
            traj.horizon()
        )));
    }
    if traj.actions[t].max(traj.actions[t + 1]) >= geometry.n_moves() {
        return Err(VacError::invalid("action has no drift in this geometry"));
    }
    Ok(bff_unchecked(traj, geometry, t))
}

fn bff_unchecked(traj: &Trajectory, geometry: &StateGeometry, t: usize) -> usize {
    let (s, a) = (&traj.states, &traj.actions);
    geometry.borrow_noise(s[t], a[t], s[t + 1], a[t + 1], s[t + 2])
}

/// One transition with a second next state for the Q-formulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QSample {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `s_{t+1}`, used by the residual.
    pub next: usize,
    /// `s'_{t+1}`, used by the gradient directions.
    pub surrogate: usize,
    pub weight: f64,
}

/// One transition plus an independent action/next-state pair for the V-formulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VSample {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
    /// `a'_t`, an action at `s_t` drawn from the behavior policy independently of `a_t`.
    pub alt_action: usize,
    /// `r(s_t, a'_t)`.
    pub alt_reward: f64,
    /// `s'_{t+1}`, a next state for `(s_t, a'_t)`.
    pub alt_next: usize,
    pub weight: f64,
}

/// Turns trajectory windows into samples according to a [`NextStateMode`].
#[derive(Clone, Debug)]
pub struct SampleSource<'a> {
    mdp: &'a FiniteMdp,
    mode: NextStateMode,
    geometry: Option<StateGeometry>,
    rng: ChaCha8Rng,
}

impl<'a> SampleSource<'a> {
    /// `seed` drives resampling only; BFF needs the state geometry.
    pub fn new(mdp: &'a FiniteMdp, mode: NextStateMode, geometry: Option<StateGeometry>, seed: u64) -> Result<Self> {
        if mode == NextStateMode::Bff {
            match geometry {
                None => return Err(VacError::invalid("BFF needs a state geometry")),
                Some(g) if g.n_states() != mdp.n_states() => {
                    return Err(VacError::shape("state geometry", mdp.n_states(), g.n_states()))
                }
                Some(g) if g.n_moves() != mdp.n_actions() => {
                    return Err(VacError::shape("geometry moves", mdp.n_actions(), g.n_moves()))
                }
                _ => {}
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(SampleSource { mdp, mode, geometry, rng })
    }

    pub fn mode(&self) -> NextStateMode {
        self.mode
    }

    fn geometry(&self) -> &StateGeometry {
        self.geometry.as_ref().expect("checked in new")
    }

    pub fn q_samples(&mut self, traj: &Trajectory, window: Range<usize>) -> Result<Vec<QSample>> {
        traj.check_window(&window)?;
        Ok(window
            .map(|t| {
                let (s, a) = (traj.states[t], traj.actions[t]);
                let surrogate = match self.mode {
                    NextStateMode::Exact => traj.states[t + 1],
                    NextStateMode::Bff => bff_unchecked(traj, self.geometry(), t),
                    NextStateMode::Resample => self.mdp.sample_next(s, a, self.rng.gen()),
                };
                QSample {
                    state: s,
                    action: a,
                    reward: traj.rewards[t],
                    next: traj.states[t + 1],
                    surrogate,
                    weight: 1.0,
                }
            })
            .collect())
    }

    /// BFF borrows `a'_t = a_{t+1}` with `s'_{t+1} = s_t + (s_{t+2} - s_{t+1})` and reuses `r_t`
    /// as `r(s_t, a'_t)`, exact when rewards do not depend on the action. Exact mode is
    /// rejected: it correlates both samples.
    pub fn v_samples(&mut self, traj: &Trajectory, window: Range<usize>) -> Result<Vec<VSample>> {
        traj.check_window(&window)?;
        if self.mode == NextStateMode::Exact {
            return Err(VacError::invalid(
                "the V-formulation needs an independent action sample; use bff or resample",
            ));
        }
        Ok(window
            .map(|t| {
                let (s, a) = (traj.states[t], traj.actions[t]);
                let (alt_action, alt_reward, alt_next) = match self.mode {
                    NextStateMode::Bff => (
                        traj.actions[t + 1],
                        traj.rewards[t],
                        self.geometry().displace(s, traj.states[t + 1], traj.states[t + 2]),
                    ),
                    _ => {
                        let b = sample_action(&traj.behavior, s, self.rng.gen());
                        (b, self.mdp.reward(s, b), self.mdp.sample_next(s, b, self.rng.gen()))
                    }
                };
                VSample {
                    state: s,
                    action: a,
                    reward: traj.rewards[t],
                    next: traj.states[t + 1],
                    alt_action,
                    alt_reward,
                    alt_next,
                    weight: 1.0,
                }
            })
            .collect())
    }
}

/// Per-sample residuals and their per-state averages over one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub residuals: Vec<f64>,
    /// Weighted mean residual `l^_s`; `None` for states absent from the batch.
    pub state_means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    states: Vec<usize>,
}

impl BatchStats {
    fn new(n_states: usize, residuals: Vec<f64>, states: Vec<usize>, weights: &[f64]) -> Self {
        let mut sums = vec![0.0; n_states];
        let mut mass = vec![0.0; n_states];
        let mut counts = vec![0; n_states];
        for ((&s, &l), &w) in states.iter().zip(&residuals).zip(weights) {
            sums[s] += w * l;
            mass[s] += w;
            counts[s] += 1;
        }
        let state_means = (0..n_states)
            .map(|s| (counts[s] > 0).then(|| sums[s] / mass[s]))
            .collect();
        BatchStats {
            residuals,
            state_means,
            counts,
            states,
        }
    }

    /// Smallest per-state mean over visited states.
    pub fn min_state_mean(&self) -> f64 {
        self.state_means.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn any_negative(&self) -> bool {
        self.state_means.iter().flatten().any(|&l| l < 0.0)
    }
}

/// `h^(L_j)`: suppression or sign flip decided by the state mean `l^_{s_j}`.
pub fn apply_hhat(stats: &BatchStats, variant: Variant) -> Vec<f64> {
    stats
        .residuals
        .iter()
        .zip(&stats.states)
        .map(|(&l, &s)| variant.apply_estimated(l, stats.state_means[s].unwrap_or(0.0)))
        .collect()
}

/// `sum_a pi_sa (Q_sa - lambda log pi_sa)`, i.e. `V(s) - lambda H(s)`.
fn soft_state_values(q: &QTable, pi: &DMatrix<f64>, log_pi: &DMatrix<f64>, lambda: f64) -> Vec<f64> {
    (0..q.nrows())
        .map(|s| {
            (0..q.ncols())
                .filter(|&a| pi[(s, a)] > 0.0)
                .map(|a| pi[(s, a)] * (q[(s, a)] - lambda * log_pi[(s, a)]))
                .sum()
        })
        .collect()
}

fn check_table(q: &QTable, pi: &Policy) -> Result<()> {
    if q.shape() != pi.shape() {
        return Err(VacError::shape(
            "Q table",
            format!("{}x{}", pi.n_states(), pi.n_actions()),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    Ok(())
}

fn check_samples<'s, I>(samples: I, n: usize, m: usize) -> Result<()>
where
    I: IntoIterator<Item = (usize, usize, &'s [usize], f64)>,
{
    let mut any = false;
    for (s, a, others, w) in samples {
        any = true;
        if s >= n || a >= m || others.iter().any(|&t| t >= n) {
            return Err(VacError::invalid("sample index out of range"));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(VacError::invalid("sample weights must be positive"));
        }
    }
    if !any {
        return Err(VacError::invalid("empty batch"));
    }
    Ok(())
}

fn check_q_samples(samples: &[QSample], n: usize, m: usize) -> Result<()> {
    check_samples(
        samples.iter().map(|x| (x.state, x.action, [x.next, x.surrogate], x.weight)).collect::<Vec<_>>().iter().map(|(s, a, o, w)| (*s, *a, &o[..], *w)),
        n,
        m,
    )
}

fn q_residuals(q: &QTable, soft: &[f64], samples: &[QSample], gamma: f64) -> Vec<f64> {
    samples
        .iter()
        .map(|x| q[(x.state, x.action)] - x.reward - gamma * soft[x.next])
        .collect()
}

fn q_stats(q: &QTable, pi: &DMatrix<f64>, log_pi: &DMatrix<f64>, samples: &[QSample], gamma: f64, lambda: f64) -> BatchStats {
    let soft = soft_state_values(q, pi, log_pi, lambda);
    let weights: Vec<f64> = samples.iter().map(|x| x.weight).collect();
    BatchStats::new(
        q.nrows(),
        q_residuals(q, &soft, samples, gamma),
        samples.iter().map(|x| x.state).collect(),
        &weights,
    )
}

/// `L_t = Q(s_t, a_t) - r_t - gamma sum_a pi(s_{t+1}, a) (Q(s_{t+1}, a) - lambda log pi(s_{t+1}, a))`.
pub fn batch_residuals(q: &QTable, pi: &Policy, samples: &[QSample], gamma: f64, lambda: f64) -> Result<BatchStats> {
    check_table(q, pi)?;
    check_q_samples(samples, q.nrows(), q.ncols())?;
    let log_pi = log_policy(pi, lambda)?;
    Ok(q_stats(q, pi.matrix(), &log_pi, samples, gamma, lambda))
}

fn total_weight<T>(samples: &[T], weight: impl Fn(&T) -> f64) -> f64 {
    samples.iter().map(weight).sum()
}

fn grad_q_inner(q: &QTable, pi: &DMatrix<f64>, samples: &[QSample], residuals: &[f64], gamma: f64, beta: f64) -> QTable {
    let mut g = DMatrix::zeros(q.nrows(), q.ncols());
    for (x, &l) in samples.iter().zip(residuals) {
        g[(x.state, x.action)] += x.weight * (-1.0 + beta * l);
        let coef = x.weight * beta * l * gamma;
        for b in 0..q.ncols() {
            g[(x.surrogate, b)] -= coef * pi[(x.surrogate, b)];
        }
    }
    g / total_weight(samples, |x| x.weight)
}

/// Batch-averaged tabular gradient of the Q-objective.
pub fn grad_q_batch(q: &QTable, pi: &Policy, samples: &[QSample], stats: &BatchStats, gamma: f64, beta: f64) -> Result<QTable> {
    check_table(q, pi)?;
    check_q_samples(samples, q.nrows(), q.ncols())?;
    if stats.residuals.len() != samples.len() {
        return Err(VacError::shape("batch residuals", samples.len(), stats.residuals.len()));
    }
    Ok(grad_q_inner(q, pi.matrix(), samples, &stats.residuals, gamma, beta))
}

fn grad_pi_inner(
    q: &QTable,
    pi: &DMatrix<f64>,
    log_pi: &DMatrix<f64>,
    samples: &[QSample],
    hhat: &[f64],
    gamma: f64,
    beta: f64,
    lambda: f64,
) -> DMatrix<f64> {
    let (n, m) = (q.nrows(), q.ncols());
    let mut bracket = DMatrix::zeros(n, m);
    for s in 0..n {
        let v: f64 = (0..m).map(|a| q[(s, a)] * pi[(s, a)]).sum();
        let h: f64 = (0..m).filter(|&a| pi[(s, a)] > 0.0).map(|a| pi[(s, a)] * log_pi[(s, a)]).sum();
        for a in 0..m {
            bracket[(s, a)] = gamma * pi[(s, a)] * (v - q[(s, a)] + lambda * log_pi[(s, a)] - lambda * h);
        }
    }
    let mut f = DMatrix::zeros(n, m);
    for (x, &h) in samples.iter().zip(hhat) {
        let coef = x.weight * beta * h;
        if coef == 0.0 {
            continue;
        }
        for a in 0..m {
            f[(x.surrogate, a)] += coef * bracket[(x.surrogate, a)];
        }
    }
    f / total_weight(samples, |x| x.weight)
}

/// Batch-averaged logit step `(1/M) sum_t f_t`; the caller applies `theta -= eta_pi * step`.
pub fn grad_pi_batch(
    q: &QTable,
    pi: &Policy,
    samples: &[QSample],
    stats: &BatchStats,
    gamma: f64,
    params: &HyperParams,
    variant: Variant,
) -> Result<DMatrix<f64>> {
    check_table(q, pi)?;
    check_q_samples(samples, q.nrows(), q.ncols())?;
    if stats.residuals.len() != samples.len() {
        return Err(VacError::shape("batch residuals", samples.len(), stats.residuals.len()));
    }
    let log_pi = log_policy(pi, params.lambda)?;
    let hhat = apply_hhat(stats, variant);
    Ok(grad_pi_inner(q, pi.matrix(), &log_pi, samples, &hhat, gamma, params.beta, params.lambda))
}

/// Exact gradients of `sum_sa mu_sa [-Q_sa + (beta/2) lQ_sa^2]` in `Q` and in the logits, where
/// `lQ_sa = Q_sa - r_sa - gamma sum_t P^a_st sum_b pi_tb (Q_tb - lambda log pi_tb)`.
pub fn q_objective_gradients(
    mdp: &FiniteMdp,
    q: &QTable,
    pi: &Policy,
    mu: &DMatrix<f64>,
    beta: f64,
    lambda: f64,
) -> Result<(QTable, DMatrix<f64>)> {
    mdp.check_policy(pi)?;
    check_table(q, pi)?;
    if mu.shape() != q.shape() {
        return Err(VacError::shape("sample weights", format!("{:?}", q.shape()), format!("{:?}", mu.shape())));
    }
    let (n, m, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let log_pi = log_policy(pi, lambda)?;
    let p = pi.matrix();
    let soft = soft_state_values(q, p, &log_pi, lambda);
    let ell = DMatrix::from_fn(n, m, |s, a| q[(s, a)] - mdp.reward(s, a) - gamma * mdp.expected_next(s, a, &soft));
    // flow[t] = sum_sa mu_sa lQ_sa P^a_st
    let mut flow = vec![0.0; n];
    for s in 0..n {
        for a in 0..m {
            for &(t, pr) in mdp.successors(s, a) {
                flow[t] += mu[(s, a)] * ell[(s, a)] * pr;
            }
        }
    }
    let g_q = DMatrix::from_fn(n, m, |t, b| {
        -mu[(t, b)] + beta * mu[(t, b)] * ell[(t, b)] - beta * gamma * flow[t] * p[(t, b)]
    });
    let g_theta = DMatrix::from_fn(n, m, |t, b| {
        let v: f64 = (0..m).map(|a| q[(t, a)] * p[(t, a)]).sum();
        let h: f64 = (0..m).filter(|&a| p[(t, a)] > 0.0).map(|a| p[(t, a)] * log_pi[(t, a)]).sum();
        beta * gamma * flow[t] * p[(t, b)] * (v - q[(t, b)] + lambda * log_pi[(t, b)] - lambda * h)
    });
    Ok((g_q, g_theta))
}

/// Model-free run options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfOptions {
    /// Record every `stride`-th batch; the last one is always recorded.
    pub stride: usize,
    /// Stop after this many batches even if the trajectory has more data.
    pub max_batches: Option<usize>,
}

impl Default for MfOptions {
    fn default() -> Self {
        MfOptions {
            stride: 1,
            max_batches: None,
        }
    }
}

/// Final parameters and trace of a model-free run.
#[derive(Clone, Debug)]
pub struct MfRun {
    /// State values `V(s) = sum_a Q(s,a) pi(s,a)` (Q-formulation) or the learned `V`.
    pub values: ValueVector,
    /// Learned Q table; absent for the V-formulation.
    pub q: Option<QTable>,
    pub theta: SoftmaxPolicy,
    pub trace: RunTrace,
    pub batches: usize,
}

fn state_values(q: &QTable, pi: &DMatrix<f64>) -> ValueVector {
    DVector::from_fn(q.nrows(), |s, _| (0..q.ncols()).map(|a| q[(s, a)] * pi[(s, a)]).sum())
}

fn check_run(mdp: &FiniteMdp, traj: &Trajectory, params: &HyperParams, reference: &Reference, options: &MfOptions) -> Result<()> {
    params.validate()?;
    traj.validate(mdp)?;
    check_behavior(mdp, &traj.behavior)?;
    mdp.check_policy(&reference.pi_star)?;
    mdp.check_values(&reference.v_star)?;
    if options.stride == 0 {
        return Err(VacError::invalid("recording stride must be at least 1"));
    }
    if traj.usable() < params.batch_size {
        return Err(VacError::TrajectoryExhausted {
            needed: params.batch_size,
            available: traj.usable(),
        });
    }
    Ok(())
}

/// Batch schedule shared by both formulations: window `k` covers `[kM, (k+1)M)`.
struct Schedule {
    batch: usize,
    batches: usize,
}

impl Schedule {
    fn new(traj: &Trajectory, batch: usize, options: &MfOptions) -> Self {
        let available = traj.usable() / batch;
        Schedule {
            batch,
            batches: options.max_batches.map_or(available, |cap| cap.min(available)),
        }
    }

    /// Window used to evaluate the iterate after `k` updates; the last update's window when exhausted.
    fn window(&self, k: usize) -> Range<usize> {
        let j = k.min(self.batches.saturating_sub(1));
        j * self.batch..(j + 1) * self.batch
    }
}

struct RecordInput<'a> {
    k: usize,
    pi: &'a Policy,
    values: &'a ValueVector,
    stats: &'a BatchStats,
    objective: f64,
    samples_consumed: usize,
}

fn make_record(input: RecordInput<'_>, reference: &Reference) -> TraceRecord {
    let min_residual = input.stats.min_state_mean();
    TraceRecord {
        iter: input.k,
        l1_policy_error: policy_l1_error(input.pi, &reference.pi_star).unwrap_or(f64::NAN),
        linf_value_error: value_linf_error(input.values, &reference.v_star),
        min_residual,
        objective: input.objective,
        negative_residual: input.stats.any_negative(),
        samples_consumed: input.samples_consumed,
    }
}

fn sample_objective(linear: impl Iterator<Item = f64>, residuals: &[f64], weights: impl Iterator<Item = f64>, beta: f64) -> f64 {
    let mut total = 0.0;
    let mut mass = 0.0;
    for ((lin, l), w) in linear.zip(residuals).zip(weights) {
        total += w * (-lin + 0.5 * beta * l * l);
        mass += w;
    }
    total / mass
}

fn divergence(k: usize, trace: RunTrace, reason: String) -> VacError {
    VacError::Divergence {
        iteration: k,
        reason,
        trace: Box::new(trace),
    }
}

/// Trains `(Q, theta)` from `Q = 0` and the uniform policy over consecutive batches of `traj`.
///
/// Every quantity of a batch is evaluated at the start-of-batch parameters. `resample_seed`
/// feeds [`NextStateMode::Resample`] and is otherwise unused.
pub fn train_q_formulation(
    mdp: &FiniteMdp,
    traj: &Trajectory,
    params: &HyperParams,
    source: &mut SampleSource<'_>,
    reference: &Reference,
    options: &MfOptions,
) -> Result<MfRun> {
    check_run(mdp, traj, params, reference, options)?;
    let (n, m, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let schedule = Schedule::new(traj, params.batch_size, options);
    let mut q = DMatrix::zeros(n, m);
    let mut theta = SoftmaxPolicy::uniform(n, m);
    let mut trace = RunTrace::default();
    let mut k = 0;
    loop {
        let samples = source.q_samples(traj, schedule.window(k))?;
        let pi = theta.policy();
        let log_pi = log_softmax(theta.logits());
        let stats = q_stats(&q, pi.matrix(), &log_pi, &samples, gamma, params.lambda);
        let values = state_values(&q, pi.matrix());
        let finished = k == schedule.batches;
        let diverged = q.amax() > DIVERGENCE_BOUND || stats.residuals.iter().any(|l| !l.is_finite());
        if k == 0 || k % options.stride == 0 || finished || diverged {
            let record = make_record(
                RecordInput {
                    k,
                    pi: &pi,
                    values: &values,
                    stats: &stats,
                    objective: sample_objective(
                        samples.iter().map(|x| q[(x.state, x.action)]),
                        &stats.residuals,
                        samples.iter().map(|x| x.weight),
                        params.beta,
                    ),
                    samples_consumed: k * schedule.batch,
                },
                reference,
            );
            if k == 0 {
                trace.initial = Some(record);
            } else {
                trace.push(record);
            }
        }
        if diverged {
            return Err(divergence(k, trace, format!("||Q||_inf exceeded {DIVERGENCE_BOUND:e}")));
        }
        if finished {
            return Ok(MfRun {
                values,
                q: Some(q),
                theta,
                trace,
                batches: k,
            });
        }
        let hhat = apply_hhat(&stats, params.variant);
        let g_q = grad_q_inner(&q, pi.matrix(), &samples, &stats.residuals, gamma, params.beta);
        let g_pi = grad_pi_inner(&q, pi.matrix(), &log_pi, &samples, &hhat, gamma, params.beta, params.lambda);
        q -= g_q * params.eta_q;
        if let Err(e) = theta.descend(&(g_pi * params.eta_pi)) {
            return Err(divergence(k + 1, trace, e.to_string()));
        }
        k += 1;
    }
}

/// Generates a trajectory from `behavior` and trains the Q-formulation on it.
#[allow(clippy::too_many_arguments)]
pub fn run_model_free(
    mdp: &FiniteMdp,
    behavior: &Policy,
    params: &HyperParams,
    horizon: usize,
    seed: u64,
    mode: NextStateMode,
    geometry: Option<StateGeometry>,
    reference: &Reference,
    options: &MfOptions,
) -> Result<MfRun> {
    let traj = generate_trajectory(mdp, behavior, horizon, seed)?;
    let mut source = SampleSource::new(mdp, mode, geometry, seed)?;
    train_q_formulation(mdp, &traj, params, &mut source, reference, options)
}

fn check_v_samples(samples: &[VSample], n: usize, m: usize) -> Result<()> {
    for x in samples {
        if x.alt_action >= m {
            return Err(VacError::invalid("sample index out of range"));
        }
    }
    check_samples(
        samples.iter().map(|x| (x.state, x.action, [x.next, x.alt_next], x.weight)).collect::<Vec<_>>().iter().map(|(s, a, o, w)| (*s, *a, &o[..], *w)),
        n,
        m,
    )
}

/// `L_t = V(s_t) - tau(s_t, a_t) (r_t + gamma V(s_{t+1})) + lambda H(s_t)`.
fn v_residuals(v: &ValueVector, pi: &DMatrix<f64>, log_pi: &DMatrix<f64>, behavior: &Policy, samples: &[VSample], gamma: f64, lambda: f64) -> BatchStats {
    let neg_entropy: Vec<f64> = (0..pi.nrows())
        .map(|s| (0..pi.ncols()).filter(|&a| pi[(s, a)] > 0.0).map(|a| pi[(s, a)] * log_pi[(s, a)]).sum())
        .collect();
    let residuals = samples
        .iter()
        .map(|x| {
            let tau = pi[(x.state, x.action)] / behavior.prob(x.state, x.action);
            v[x.state] - tau * (x.reward + gamma * v[x.next]) + lambda * neg_entropy[x.state]
        })
        .collect();
    let weights: Vec<f64> = samples.iter().map(|x| x.weight).collect();
    BatchStats::new(v.len(), residuals, samples.iter().map(|x| x.state).collect(), &weights)
}

fn v_gradients_inner(
    v: &ValueVector,
    pi: &DMatrix<f64>,
    log_pi: &DMatrix<f64>,
    behavior: &Policy,
    samples: &[VSample],
    stats: &BatchStats,
    gamma: f64,
    params: &HyperParams,
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, m) = (pi.nrows(), pi.ncols());
    let (beta, lambda) = (params.beta, params.lambda);
    let hhat = apply_hhat(stats, params.variant);
    let mut g_v = DVector::zeros(n);
    let mut g_theta = DMatrix::zeros(n, m);
    for ((x, &l), &h) in samples.iter().zip(&stats.residuals).zip(&hhat) {
        let s = x.state;
        let tau_alt = pi[(s, x.alt_action)] / behavior.prob(s, x.alt_action);
        g_v[s] += x.weight * (-1.0 + beta * l);
        g_v[x.alt_next] -= x.weight * beta * l * gamma * tau_alt;
        let coef = x.weight * beta * h;
        if coef == 0.0 {
            continue;
        }
        let target = tau_alt * (x.alt_reward + gamma * v[x.alt_next]);
        let neg_entropy: f64 = (0..m).filter(|&a| pi[(s, a)] > 0.0).map(|a| pi[(s, a)] * log_pi[(s, a)]).sum();
        for b in 0..m {
            let score = if b == x.alt_action { 1.0 } else { 0.0 } - pi[(s, b)];
            let entropy = pi[(s, b)] * (log_pi[(s, b)] - neg_entropy);
            g_theta[(s, b)] += coef * (-target * score + lambda * entropy);
        }
    }
    let total = total_weight(samples, |x| x.weight);
    (g_v / total, g_theta / total)
}

/// Batch residual statistics of the V-formulation.
pub fn v_batch_residuals(v: &ValueVector, pi: &Policy, behavior: &Policy, samples: &[VSample], gamma: f64, lambda: f64) -> Result<BatchStats> {
    if v.len() != pi.n_states() {
        return Err(VacError::shape("value vector", pi.n_states(), v.len()));
    }
    check_v_samples(samples, pi.n_states(), pi.n_actions())?;
    if behavior.shape() != pi.shape() || !behavior.is_strictly_positive() {
        return Err(VacError::invalid("behavior policy must match the policy shape and be strictly positive"));
    }
    let log_pi = log_policy(pi, lambda)?;
    Ok(v_residuals(v, pi.matrix(), &log_pi, behavior, samples, gamma, lambda))
}

/// Batch-averaged V-formulation gradients `(G_V, G_theta)`, with `G_theta` taken in raw logits.
pub fn v_formulation_gradients(
    v: &ValueVector,
    pi: &Policy,
    behavior: &Policy,
    samples: &[VSample],
    gamma: f64,
    params: &HyperParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let stats = v_batch_residuals(v, pi, behavior, samples, gamma, params.lambda)?;
    let log_pi = log_policy(pi, params.lambda)?;
    Ok(v_gradients_inner(v, pi.matrix(), &log_pi, behavior, samples, &stats, gamma, params))
}

/// One batch update of `(V, theta)` in the V-formulation.
pub fn v_formulation_step(
    v: &ValueVector,
    theta: &SoftmaxPolicy,
    behavior: &Policy,
    samples: &[VSample],
    gamma: f64,
    params: &HyperParams,
) -> Result<(ValueVector, SoftmaxPolicy)> {
    params.validate()?;
    let pi = theta.policy();
    let stats = v_batch_residuals(v, &pi, behavior, samples, gamma, params.lambda)?;
    let log_pi = log_softmax(theta.logits());
    let (g_v, g_theta) = v_gradients_inner(v, pi.matrix(), &log_pi, behavior, samples, &stats, gamma, params);
    let next_v = v - g_v * params.eta_v;
    if next_v.iter().any(|x| !x.is_finite()) {
        return Err(VacError::Numerical("non-finite value iterate".into()));
    }
    let mut next_theta = theta.clone();
    next_theta.descend(&(g_theta * params.eta_pi))?;
    Ok((next_v, next_theta))
}

/// Trains `(V, theta)` in the V-formulation from `V = 0` and the uniform policy.
pub fn train_v_formulation(
    mdp: &FiniteMdp,
    traj: &Trajectory,
    params: &HyperParams,
    source: &mut SampleSource<'_>,
    reference: &Reference,
    options: &MfOptions,
) -> Result<MfRun> {
    check_run(mdp, traj, params, reference, options)?;
    let (n, m, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let schedule = Schedule::new(traj, params.batch_size, options);
    let mut v = DVector::zeros(n);
    let mut theta = SoftmaxPolicy::uniform(n, m);
    let mut trace = RunTrace::default();
    let mut k = 0;
    loop {
        let samples = source.v_samples(traj, schedule.window(k))?;
        let pi = theta.policy();
        let log_pi = log_softmax(theta.logits());
        let stats = v_residuals(&v, pi.matrix(), &log_pi, &traj.behavior, &samples, gamma, params.lambda);
        let finished = k == schedule.batches;
        let diverged = v.amax() > DIVERGENCE_BOUND || stats.residuals.iter().any(|l| !l.is_finite());
        if k == 0 || k % options.stride == 0 || finished || diverged {
            let record = make_record(
                RecordInput {
                    k,
                    pi: &pi,
                    values: &v,
                    stats: &stats,
                    objective: sample_objective(
                        samples.iter().map(|x| v[x.state]),
                        &stats.residuals,
                        samples.iter().map(|x| x.weight),
                        params.beta,
                    ),
                    samples_consumed: k * schedule.batch,
                },
                reference,
            );
            if k == 0 {
                trace.initial = Some(record);
            } else {
                trace.push(record);
            }
        }
        if diverged {
            return Err(divergence(k, trace, format!("||V||_inf exceeded {DIVERGENCE_BOUND:e}")));
        }
        if finished {
            return Ok(MfRun {
                values: v,
                q: None,
                theta,
                trace,
                batches: k,
            });
        }
        let (g_v, g_theta) = v_gradients_inner(&v, pi.matrix(), &log_pi, &traj.behavior, &samples, &stats, gamma, params);
        v -= g_v * params.eta_v;
        if let Err(e) = theta.descend(&(g_theta * params.eta_pi)) {
            return Err(divergence(k + 1, trace, e.to_string()));
        }
        k += 1;
    }
}
