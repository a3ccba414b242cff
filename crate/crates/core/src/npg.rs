//! Natural policy gradient baseline with a stochastic Bellman-residual Q estimate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VacError};
use crate::mdp::{FiniteMdp, Policy, SoftmaxPolicy};
use crate::model_based::{log_softmax, DIVERGENCE_BOUND};
use crate::model_free::{QSample, QTable, SampleSource, Trajectory};
use crate::trace::{policy_l1_error, value_linf_error, Reference, RunTrace, TraceRecord};

/// Batches allowed per Q estimate before giving up.
pub const MAX_INNER_BATCHES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NpgParams {
    pub lambda: f64,
    pub eta_pi: f64,
    pub eta_q: f64,
    pub batch_size: usize,
    /// Inner loop stops once `sum_sa (Q^j - Q^{j-1})^2 / n < eps`.
    pub eps: f64,
}

impl NpgParams {
    pub fn validate(&self, gamma: f64) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, eta) in [("eta_pi", self.eta_pi), ("eta_q", self.eta_q)] {
            if !(eta >= 0.0 && eta.is_finite()) {
                problems.push(format!("{name} must be non-negative, got {eta}"));
            }
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push(format!("eps must be positive, got {}", self.eps));
        }
        if self.lambda * self.eta_pi / (1.0 - gamma) >= 1.0 {
            problems.push("lambda * eta_pi / (1 - gamma) must be below 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(VacError::InvalidInput(problems.join("; ")))
        }
    }
}

fn decay(eta_pi: f64, lambda: f64, gamma: f64) -> Result<f64> {
    let c = lambda * eta_pi / (1.0 - gamma);
    if !(0.0..1.0).contains(&c) {
        return Err(VacError::invalid(format!(
            "lambda * eta_pi / (1 - gamma) must lie in [0, 1), got {c}"
        )));
    }
    Ok(1.0 - c)
}

/// `log pi <- (1 - lambda eta/(1-gamma)) log pi + eta Q/(1-gamma)`, renormalized per row.
pub fn npg_policy_update(pi: &Policy, q: &QTable, eta_pi: f64, lambda: f64, gamma: f64) -> Result<Policy> {
    if !pi.is_strictly_positive() {
        return Err(VacError::invalid("NPG needs a strictly positive policy"));
    }
    if q.shape() != pi.shape() {
        return Err(VacError::shape("Q table", format!("{:?}", pi.shape()), format!("{:?}", q.shape())));
    }
    let keep = decay(eta_pi, lambda, gamma)?;
    let logits = pi.matrix().map(f64::ln) * keep + q * (eta_pi / (1.0 - gamma));
    Ok(SoftmaxPolicy::new(logits)?.policy())
}

fn npg_logit_update(theta: &SoftmaxPolicy, q: &QTable, keep: f64, eta_pi: f64, gamma: f64) -> Result<SoftmaxPolicy> {
    SoftmaxPolicy::new(log_softmax(theta.logits()) * keep + q * (eta_pi / (1.0 - gamma)))
}

/// A settled Q estimate and what it cost.
#[derive(Clone, Debug, PartialEq)]
pub struct QEstimate {
    pub q: QTable,
    pub batches: usize,
    /// Smallest per-state mean of `w_t` over the final batch.
    pub min_residual: f64,
    /// Half the mean squared `w_t` over the final batch.
    pub mean_square: f64,
}

fn inner_step(q: &mut QTable, pi: &DMatrix<f64>, soft: &DVector<f64>, samples: &[QSample], gamma: f64, eta_q: f64) -> (f64, f64) {
    let (n, m) = q.shape();
    let mut g = DMatrix::zeros(n, m);
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut square = 0.0;
    for x in samples {
        let w = q[(x.state, x.action)] - x.reward - gamma * soft[x.next];
        g[(x.state, x.action)] += w;
        for b in 0..m {
            g[(x.surrogate, b)] -= gamma * pi[(x.surrogate, b)] * w;
        }
        sums[x.state] += w;
        counts[x.state] += 1;
        square += w * w;
    }
    let min_mean = (0..n)
        .filter(|&s| counts[s] > 0)
        .map(|s| sums[s] / counts[s] as f64)
        .fold(f64::INFINITY, f64::min);
    *q -= g * (eta_q / samples.len() as f64);
    (min_mean, 0.5 * square / samples.len() as f64)
}

/// Stochastic Bellman-residual estimate of the regularized `Q^pi`, warm-started at `q0`.
///
/// Batches are read from `traj` starting at window index `*cursor`, which is advanced.
pub fn npg_estimate_q(
    q0: &QTable,
    pi: &Policy,
    traj: &Trajectory,
    source: &mut SampleSource<'_>,
    cursor: &mut usize,
    gamma: f64,
    params: &NpgParams,
) -> Result<QEstimate> {
    params.validate(gamma)?;
    if q0.shape() != pi.shape() {
        return Err(VacError::shape("Q table", format!("{:?}", pi.shape()), format!("{:?}", q0.shape())));
    }
    if params.lambda > 0.0 && !pi.is_strictly_positive() {
        return Err(VacError::invalid("log pi is undefined for zero-probability actions"));
    }
    let (n, m) = q0.shape();
    let p = pi.matrix();
    let soft = DVector::from_fn(n, |s, _| {
        (0..m)
            .filter(|&a| p[(s, a)] > 0.0)
            .map(|a| p[(s, a)] * (-params.lambda * p[(s, a)].ln()))
            .sum::<f64>()
    });
    let mut q = q0.clone();
    let mut last_change = f64::INFINITY;
    for batches in 1..=MAX_INNER_BATCHES {
        let start = *cursor * params.batch_size;
        let samples = source.q_samples(traj, start..start + params.batch_size)?;
        *cursor += 1;
        let prev = q.clone();
        let v_soft = DVector::from_fn(n, |s, _| soft[s] + (0..m).map(|a| p[(s, a)] * q[(s, a)]).sum::<f64>());
        let (min_residual, mean_square) = inner_step(&mut q, p, &v_soft, &samples, gamma, params.eta_q);
        if q.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_BOUND) {
            return Err(VacError::Numerical("Q estimate diverged".into()));
        }
        last_change = (&q - prev).norm_squared() / n as f64;
        if last_change < params.eps {
            return Ok(QEstimate {
                q,
                batches,
                min_residual,
                mean_square,
            });
        }
    }
    Err(VacError::Estimation {
        batches: MAX_INNER_BATCHES,
        last_change,
        eps: params.eps,
    })
}

/// Outcome of an NPG run.
#[derive(Clone, Debug)]
pub struct NpgRun {
    pub theta: SoftmaxPolicy,
    pub q: QTable,
    pub trace: RunTrace,
    /// Completed policy updates.
    pub outer_iterations: usize,
    pub samples_consumed: usize,
    /// The run stopped because the trajectory ran out.
    pub exhausted: bool,
}

fn state_values(q: &QTable, pi: &Policy) -> DVector<f64> {
    DVector::from_fn(q.nrows(), |s, _| (0..q.ncols()).map(|a| q[(s, a)] * pi.prob(s, a)).sum())
}

/// Alternates Q estimation and the multiplicative policy update from `Q = 0` and the uniform policy.
pub fn run_npg(
    mdp: &FiniteMdp,
    traj: &Trajectory,
    params: &NpgParams,
    source: &mut SampleSource<'_>,
    reference: &Reference,
    outer_iterations: usize,
) -> Result<NpgRun> {
    let gamma = mdp.gamma();
    params.validate(gamma)?;
    traj.validate(mdp)?;
    let keep = decay(params.eta_pi, params.lambda, gamma)?;
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let mut theta = SoftmaxPolicy::uniform(n, m);
    let mut q = DMatrix::zeros(n, m);
    let mut trace = RunTrace::default();
    let mut cursor = 0;
    let record = |k: usize, pi: &Policy, q: &QTable, min_residual: f64, objective: f64, cursor: usize| -> Result<TraceRecord> {
        Ok(TraceRecord {
            iter: k,
            l1_policy_error: policy_l1_error(pi, &reference.pi_star)?,
            linf_value_error: value_linf_error(&state_values(q, pi), &reference.v_star),
            min_residual,
            objective,
            negative_residual: min_residual < 0.0,
            samples_consumed: cursor * params.batch_size,
        })
    };
    trace.initial = Some(record(0, &theta.policy(), &q, f64::NAN, f64::NAN, 0)?);
    let mut exhausted = false;
    let mut k = 0;
    while k < outer_iterations {
        let pi = theta.policy();
        let estimate = match npg_estimate_q(&q, &pi, traj, source, &mut cursor, gamma, params) {
            Ok(e) => e,
            Err(VacError::TrajectoryExhausted { .. }) => {
                exhausted = true;
                break;
            }
            Err(VacError::Numerical(reason)) => {
                return Err(VacError::Divergence {
                    iteration: k + 1,
                    reason,
                    trace: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        q = estimate.q;
        theta = npg_logit_update(&theta, &q, keep, params.eta_pi, gamma)?;
        k += 1;
        trace.push(record(k, &theta.policy(), &q, estimate.min_residual, estimate.mean_square, cursor)?);
    }
    Ok(NpgRun {
        theta,
        q,
        trace,
        outer_iterations: k,
        samples_consumed: cursor * params.batch_size,
        exhausted,
    })
}
