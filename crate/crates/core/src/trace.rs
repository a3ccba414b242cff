use crate::error::{Result, VacError};
use crate::mdp::{Policy, ValueVector};

/// Metrics for one recorded iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// `sum_{s,a} |pi_sa - pi*_sa|`.
    pub l1_policy_error: f64,
    /// `max_s |V_s - V*_s|` against the reference values.
    pub linf_value_error: f64,
    /// `min_s l_s` (model-based) or the smallest batch state estimate (model-free).
    pub min_residual: f64,
    pub objective: f64,
    /// Some state carried a negative residual at this iteration.
    pub negative_residual: bool,
    /// Transitions consumed so far (zero for model-based runs).
    pub samples_consumed: usize,
}

/// Per-iteration records of a run plus the metrics of the initial state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub initial: Option<TraceRecord>,
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn push(&mut self, record: TraceRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.iter < record.iter));
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Final policy error, falling back to the initial record for empty traces.
    pub fn final_policy_error(&self) -> Option<f64> {
        self.records.last().or(self.initial.as_ref()).map(|r| r.l1_policy_error)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Target against which traces measure errors.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub pi_star: Policy,
    pub v_star: ValueVector,
}

/// `||pi - pi*||_{L1} = sum_{s,a} |pi_sa - pi*_sa|`.
pub fn policy_l1_error(pi: &Policy, pi_star: &Policy) -> Result<f64> {
    if pi.shape() != pi_star.shape() {
        return Err(VacError::shape(
            "policy",
            format!("{}x{}", pi_star.n_states(), pi_star.n_actions()),
            format!("{}x{}", pi.n_states(), pi.n_actions()),
        ));
    }
    Ok(pi
        .matrix()
        .iter()
        .zip(pi_star.matrix().iter())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

pub(crate) fn value_linf_error(v: &ValueVector, v_star: &ValueVector) -> f64 {
    v.iter()
        .zip(v_star.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
