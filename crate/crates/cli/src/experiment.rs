//! Seeded multi-run orchestration.

use rayon::prelude::*;
use vac_core::model_based::{run_model_based, MbState, RunOptions};
use vac_core::model_free::{generate_trajectory, train_q_formulation, train_v_formulation, MfOptions, SampleSource, Trajectory};
use vac_core::npg::run_npg;
use vac_core::oracle::{soft_value_iteration, value_iteration, OptimalSolution};
use vac_core::{Policy, Reference, RunTrace, StateDistribution, VacError};

use crate::config::{InitKind, Method, Plan, ReferenceKind};

pub struct SeedOutcome {
    pub seed: u64,
    /// Records gathered before any failure.
    pub trace: RunTrace,
    pub error: Option<String>,
}

pub fn reference(plan: &Plan) -> vac_core::Result<OptimalSolution> {
    match plan.reference {
        ReferenceKind::Optimal => value_iteration(&plan.mdp, 1e-12),
        ReferenceKind::Regularized => soft_value_iteration(&plan.mdp, plan.params.lambda, 1e-12),
    }
}

fn trajectory_for(plan: &Plan, seed: u64) -> vac_core::Result<Trajectory> {
    match &plan.trajectory {
        Some(path) => {
            let traj = Trajectory::read(path)?;
            traj.validate(&plan.mdp)?;
            Ok(traj)
        }
        None => {
            let behavior = Policy::uniform(plan.mdp.n_states(), plan.mdp.n_actions());
            generate_trajectory(&plan.mdp, &behavior, plan.horizon, seed)
        }
    }
}

fn run_seed(plan: &Plan, reference: &Reference, seed: u64) -> vac_core::Result<RunTrace> {
    let mdp = &plan.mdp;
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    if plan.method == Method::ModelBased {
        let init = match plan.init {
            InitKind::Uniform => MbState::initial(n, m),
            InitKind::Perturbed => MbState::perturbed(n, m, seed),
        };
        let mut options = RunOptions::new(plan.max_iters);
        options.stride = plan.stride;
        options.stop.tol = plan.tol;
        let rho = StateDistribution::uniform(n);
        return Ok(run_model_based(mdp, &rho, &plan.params, init, &options, reference)?.trace);
    }
    let traj = trajectory_for(plan, seed)?;
    let mut source = SampleSource::new(mdp, plan.mode, plan.geometry, seed)?;
    let options = MfOptions {
        stride: plan.stride,
        max_batches: None,
    };
    match plan.method {
        Method::ModelFree => Ok(train_q_formulation(mdp, &traj, &plan.params, &mut source, reference, &options)?.trace),
        Method::VFormulation => Ok(train_v_formulation(mdp, &traj, &plan.params, &mut source, reference, &options)?.trace),
        Method::Npg => {
            let npg = plan.npg.as_ref().expect("npg parameters resolved");
            let run = run_npg(mdp, &traj, npg, &mut source, reference, plan.outer_iterations)?;
            let mut trace = run.trace;
            trace.records.retain(|r| r.iter % plan.stride == 0 || Some(r.iter) == Some(run.outer_iterations));
            Ok(trace)
        }
        Method::ModelBased => unreachable!(),
    }
}

/// Runs every seed on the rayon pool; results come back in seed order.
pub fn run_all(plan: &Plan, reference: &Reference) -> Vec<SeedOutcome> {
    plan.seeds
        .par_iter()
        .map(|&seed| match run_seed(plan, reference, seed) {
            Ok(trace) => SeedOutcome { seed, trace, error: None },
            Err(VacError::Divergence { iteration, reason, trace }) => SeedOutcome {
                seed,
                trace: *trace,
                error: Some(format!("diverged at iteration {iteration}: {reason}")),
            },
            Err(e) => SeedOutcome {
                seed,
                trace: RunTrace::default(),
                error: Some(e.to_string()),
            },
        })
        .collect()
}
