//! Value-policy actor-critic solvers driven by a penalized Bellman-residual objective.

// `!(x > 0.0)` deliberately rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod error;
pub mod instances;
pub mod model_based;
pub mod mdp;
pub mod model_free;
pub mod npg;
pub mod oracle;
pub mod params;
pub mod trace;

pub use error::{Result, VacError};
pub use mdp::{FiniteMdp, Policy, SoftmaxPolicy, StateDistribution, ValueVector};
pub use params::{HyperParams, Variant};
pub use trace::{Reference, RunTrace, TraceRecord};
