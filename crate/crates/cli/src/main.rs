//! `vac`: solve, train and verify tabular variational actor-critic experiments.

mod config;
mod experiment;
mod report;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use vac_core::instances::mdp_fingerprint;
use vac_core::model_free::generate_trajectory;
use vac_core::oracle::{soft_value_iteration, value_iteration};
use vac_core::{Policy, Reference};

use config::{read_config, ConfigError, ExperimentConfig, Method, Plan};

#[derive(Parser)]
#[command(name = "vac", version, about = "Variational actor-critic experiments on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the exact optimum of the configured MDP.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured method once per seed and write CSV traces.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `run.out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the configured seed list; repeat for several seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Sample a behavior trajectory and write it as text.
    GenTraj {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a built-in property suite.
    Verify {
        #[arg(long, value_enum)]
        suite: verify::Suite,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load(path: &Path, seeds: &[u64]) -> Result<(ExperimentConfig, String, Plan), Failure> {
    let (config, text) = read_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let plan = config.plan(base, seeds)?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    Ok((config, text, plan))
}

#[derive(Serialize)]
struct Solution {
    v_star: Vec<f64>,
    greedy_actions: Vec<usize>,
    pi_star: Vec<Vec<f64>>,
}

impl Solution {
    fn new(v: &vac_core::ValueVector, pi: &Policy, greedy: &[usize]) -> Self {
        Solution {
            v_star: v.iter().copied().collect(),
            greedy_actions: greedy.to_vec(),
            pi_star: pi.matrix().row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

#[derive(Serialize)]
struct SolveReport {
    mdp_hash: String,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    action_gap: Option<f64>,
    beta_threshold: Option<f64>,
    optimal: Solution,
    regularized: Option<Solution>,
}

fn solve(config: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let (_, _, plan) = load(config, &[])?;
    let mdp = &plan.mdp;
    let sol = value_iteration(mdp, 1e-12).map_err(runtime)?;
    let (action_gap, beta_threshold) = report::gap_and_threshold(&plan, &sol.v_star);
    let lambda = plan.params.lambda;
    let regularized = if lambda > 0.0 {
        let soft = soft_value_iteration(mdp, lambda, 1e-12).map_err(runtime)?;
        Some(Solution::new(&soft.v_star, &soft.pi_star, &soft.greedy_actions))
    } else {
        None
    };
    let text = toml::to_string(&SolveReport {
        mdp_hash: mdp_fingerprint(mdp),
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        gamma: mdp.gamma(),
        action_gap,
        beta_threshold,
        optimal: Solution::new(&sol.v_star, &sol.pi_star, &sol.greedy_actions),
        regularized,
    })
    .map_err(runtime)?;
    match out {
        Some(path) => std::fs::write(path, text).map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(config_path: &Path, out: Option<&Path>, seeds: &[u64]) -> Result<(), Failure> {
    let (config, text, plan) = load(config_path, seeds)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| plan.out.clone())
        .ok_or_else(|| Failure::Validation("no output directory: pass --out or set run.out".into()))?;
    let solution = experiment::reference(&plan).map_err(runtime)?;
    let unregularized = match plan.reference {
        config::ReferenceKind::Optimal => solution.v_star.clone(),
        config::ReferenceKind::Regularized => value_iteration(&plan.mdp, 1e-12).map_err(runtime)?.v_star,
    };
    let gap = report::gap_and_threshold(&plan, &unregularized);
    let reference = Reference {
        pi_star: solution.pi_star.clone(),
        v_star: solution.v_star.clone(),
    };
    let config_hash = report::sha256_hex(text.as_bytes());

    let outcomes = experiment::run_all(&plan, &reference);

    std::fs::create_dir_all(&out).map_err(runtime)?;
    for o in &outcomes {
        let id = report::run_id(&config_hash, o.seed);
        report::write_trace(&out.join(report::trace_file_name(o.seed)), &id, o.seed, &o.trace.records).map_err(runtime)?;
    }
    let traces: Vec<_> = outcomes.iter().map(|o| o.trace.records.as_slice()).collect();
    report::write_aggregate(&out.join("aggregate.csv"), &report::aggregate(&traces)).map_err(runtime)?;
    report::write_metadata(&out.join("metadata.toml"), &config, &config_hash, &plan, &solution, gap, &outcomes)
        .map_err(runtime)?;

    let failed: Vec<_> = outcomes.iter().filter(|o| o.error.is_some()).collect();
    for o in &outcomes {
        match &o.error {
            Some(e) => eprintln!("seed {}: FAILED: {e}", o.seed),
            None => eprintln!(
                "seed {}: final l1 policy error {:.4e}",
                o.seed,
                o.trace.last().map_or(f64::NAN, |r| r.l1_policy_error)
            ),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} of {} seeds failed", failed.len(), outcomes.len())))
    }
}

fn gen_traj(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let (_, _, plan) = load(config, &[])?;
    if plan.method == Method::ModelBased {
        eprintln!("warning: model-based runs do not read trajectories");
    }
    let seed = seed.unwrap_or(plan.seeds[0]);
    let behavior = Policy::uniform(plan.mdp.n_states(), plan.mdp.n_actions());
    let traj = generate_trajectory(&plan.mdp, &behavior, plan.horizon, seed).map_err(runtime)?;
    traj.write(out).map_err(runtime)
}

fn verify(suite: verify::Suite) -> Result<(), Failure> {
    let checks = verify::run(suite);
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.pass) {
        Ok(())
    } else {
        Err(Failure::Runtime("verification failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Solve { config, out } => solve(config, out.as_deref()),
        Command::Train { config, out, seeds } => train(config, out.as_deref(), seeds),
        Command::GenTraj { config, out, seed } => gen_traj(config, out, *seed),
        Command::Verify { suite } => verify(*suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
