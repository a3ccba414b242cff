use std::fmt;
use std::str::FromStr;

use crate::error::{Result, VacError};

/// Residual transform applied to the policy-gradient prefactor.
///
/// `Vanilla` is the identity, `Clipping` suppresses negative residuals and
/// `Flipping` takes the absolute value. All three agree for positive input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Vanilla,
    Clipping,
    Flipping,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::Clipping, Variant::Flipping];

    /// Index `i` of the transform `h^(i)`.
    pub fn index(self) -> usize {
        match self {
            Variant::Vanilla => 0,
            Variant::Clipping => 1,
            Variant::Flipping => 2,
        }
    }

    /// `h^(i)(x)`.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Variant::Vanilla => x,
            Variant::Clipping => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Variant::Flipping => x.abs(),
        }
    }

    /// Sample-level transform driven by the state-level residual estimate.
    ///
    /// The sign decision comes from `state_estimate`, never from `sample`.
    /// An estimate of exactly zero suppresses under clipping and keeps the
    /// sample unchanged under flipping.
    #[inline]
    pub fn apply_estimated(self, sample: f64, state_estimate: f64) -> f64 {
        match self {
            Variant::Vanilla => sample,
            Variant::Clipping => {
                if state_estimate > 0.0 {
                    sample
                } else {
                    0.0
                }
            }
            Variant::Flipping => {
                if state_estimate < 0.0 {
                    -sample
                } else {
                    sample
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Clipping => "clipping",
            Variant::Flipping => "flipping",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = VacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "0" => Ok(Variant::Vanilla),
            "clipping" | "1" => Ok(Variant::Clipping),
            "flipping" | "2" => Ok(Variant::Flipping),
            other => Err(VacError::invalid(format!("unknown variant `{other}`"))),
        }
    }
}

/// Hyperparameters shared by the model-based and model-free solvers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    /// Bellman-residual prefactor.
    pub beta: f64,
    /// Entropy regularization strength.
    pub lambda: f64,
    pub eta_v: f64,
    pub eta_pi: f64,
    pub eta_q: f64,
    /// Samples per stochastic batch.
    pub batch_size: usize,
    pub variant: Variant,
}

impl HyperParams {
    /// Model-based defaults: `eta_v = eta_pi = 1/(4 beta)`.
    pub fn model_based(beta: f64, lambda: f64, variant: Variant) -> Self {
        let eta = 1.0 / (4.0 * beta);
        HyperParams {
            beta,
            lambda,
            eta_v: eta,
            eta_pi: eta,
            eta_q: eta,
            batch_size: 1,
            variant,
        }
    }

    /// Zero learning rates are accepted and freeze the corresponding parameters.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            problems.push(format!("beta must be positive and finite, got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        for (name, eta) in [("eta_v", self.eta_v), ("eta_pi", self.eta_pi), ("eta_q", self.eta_q)] {
            if !(eta >= 0.0 && eta.is_finite()) {
                problems.push(format!("{name} must be non-negative, got {eta}"));
            }
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(VacError::InvalidInput(problems.join("; ")))
        }
    }
}
