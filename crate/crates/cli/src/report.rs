//! CSV traces, cross-seed aggregates and run metadata.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use vac_core::instances::mdp_fingerprint;
use vac_core::oracle::{action_gap, beta_threshold, OptimalSolution};
use vac_core::{StateDistribution, TraceRecord};

use crate::config::{ExperimentConfig, Plan};
use crate::experiment::SeedOutcome;

pub const TRACE_HEADER: [&str; 9] = [
    "run_id",
    "seed",
    "iter",
    "l1_policy_error",
    "linf_value_error",
    "min_residual",
    "objective",
    "negative_residual_flag",
    "samples_consumed",
];

#[derive(Serialize)]
struct TraceRow<'a> {
    run_id: &'a str,
    seed: u64,
    iter: usize,
    l1_policy_error: f64,
    linf_value_error: f64,
    min_residual: f64,
    objective: f64,
    negative_residual_flag: u8,
    samples_consumed: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run_id(config_hash: &str, seed: u64) -> String {
    format!("{}-s{seed}", &config_hash[..12])
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

pub fn write_trace(path: &Path, run_id: &str, seed: u64, records: &[TraceRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(TRACE_HEADER)?;
    }
    for r in records {
        w.serialize(TraceRow {
            run_id,
            seed,
            iter: r.iter,
            l1_policy_error: r.l1_policy_error,
            linf_value_error: r.linf_value_error,
            min_residual: r.min_residual,
            objective: r.objective,
            negative_residual_flag: u8::from(r.negative_residual),
            samples_consumed: r.samples_consumed,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub iter: usize,
    pub runs: usize,
    pub l1_mean: f64,
    pub l1_p10: f64,
    pub l1_p50: f64,
    pub l1_p90: f64,
    pub linf_mean: f64,
    pub linf_p10: f64,
    pub linf_p50: f64,
    pub linf_p90: f64,
    pub negative_fraction: f64,
}

fn bands(mut xs: Vec<f64>) -> (f64, f64, f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    (mean, percentile(&xs, 0.1), percentile(&xs, 0.5), percentile(&xs, 0.9))
}

/// Per-iteration mean and 10/50/90 percentiles over every run that recorded that iteration.
pub fn aggregate(traces: &[&[TraceRecord]]) -> Vec<AggregateRow> {
    let mut by_iter: BTreeMap<usize, Vec<&TraceRecord>> = BTreeMap::new();
    for trace in traces {
        for r in trace.iter() {
            by_iter.entry(r.iter).or_default().push(r);
        }
    }
    by_iter
        .into_iter()
        .map(|(iter, rs)| {
            let (l1_mean, l1_p10, l1_p50, l1_p90) = bands(rs.iter().map(|r| r.l1_policy_error).collect());
            let (linf_mean, linf_p10, linf_p50, linf_p90) = bands(rs.iter().map(|r| r.linf_value_error).collect());
            AggregateRow {
                iter,
                runs: rs.len(),
                l1_mean,
                l1_p10,
                l1_p50,
                l1_p90,
                linf_mean,
                linf_p10,
                linf_p50,
                linf_p90,
                negative_fraction: rs.iter().filter(|r| r.negative_residual).count() as f64 / rs.len() as f64,
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SeedStatus {
    seed: u64,
    run_id: String,
    records: usize,
    final_l1_policy_error: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    config_hash: &'a str,
    mdp_hash: String,
    oracle_hash: String,
    method: &'a str,
    next_state_mode: Option<&'a str>,
    horizon: Option<usize>,
    action_gap: Option<f64>,
    /// Prefactor threshold at `alpha = gap / 4` under uniform state weights.
    beta_threshold: Option<f64>,
    seeds: &'a [u64],
    warnings: &'a [String],
    hyper_params: BTreeMap<&'static str, f64>,
    config: &'a ExperimentConfig,
    runs: Vec<SeedStatus>,
}

pub fn oracle_hash(solution: &OptimalSolution) -> String {
    let mut text = String::new();
    for x in solution.v_star.iter().chain(solution.pi_star.matrix().iter()) {
        text.push_str(&format!("{x:e}\n"));
    }
    sha256_hex(text.as_bytes())
}

/// Action gap of the unregularized optimum and the matching threshold, when defined.
pub fn gap_and_threshold(plan: &Plan, v_star: &vac_core::ValueVector) -> (Option<f64>, Option<f64>) {
    let gap = action_gap(&plan.mdp, v_star).ok().filter(|g| *g > 0.0);
    let rho = StateDistribution::uniform(plan.mdp.n_states());
    let threshold = gap.and_then(|g| beta_threshold(&plan.mdp, g / 4.0, &rho).ok());
    (gap, threshold)
}

#[allow(clippy::too_many_arguments)]
pub fn write_metadata(
    path: &Path,
    config: &ExperimentConfig,
    config_hash: &str,
    plan: &Plan,
    solution: &OptimalSolution,
    gap: (Option<f64>, Option<f64>),
    outcomes: &[SeedOutcome],
) -> std::io::Result<()> {
    let sampled = plan.method != crate::config::Method::ModelBased;
    let mut hyper_params = BTreeMap::new();
    if let Some(npg) = &plan.npg {
        hyper_params.extend([("lambda", npg.lambda), ("eta_pi", npg.eta_pi), ("eta_q", npg.eta_q), ("eps", npg.eps)]);
        hyper_params.insert("batch_size", npg.batch_size as f64);
    } else {
        let p = &plan.params;
        hyper_params.extend([("beta", p.beta), ("lambda", p.lambda), ("eta_v", p.eta_v), ("eta_pi", p.eta_pi)]);
        if sampled {
            hyper_params.extend([("eta_q", p.eta_q), ("batch_size", p.batch_size as f64)]);
        } else {
            hyper_params.extend([("max_iters", plan.max_iters as f64), ("tol", plan.tol)]);
        }
    }
    let meta = Metadata {
        config_hash,
        mdp_hash: mdp_fingerprint(&plan.mdp),
        oracle_hash: oracle_hash(solution),
        method: plan.method.name(),
        next_state_mode: sampled.then(|| plan.mode.name()),
        horizon: sampled.then_some(plan.horizon),
        action_gap: gap.0,
        beta_threshold: gap.1,
        seeds: &plan.seeds,
        warnings: &plan.warnings,
        hyper_params,
        config,
        runs: outcomes
            .iter()
            .map(|o| SeedStatus {
                seed: o.seed,
                run_id: run_id(config_hash, o.seed),
                records: o.trace.records.len(),
                final_l1_policy_error: o.trace.last().map(|r| r.l1_policy_error),
                error: o.error.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&meta).map_err(std::io::Error::other)?;
    std::fs::File::create(path)?.write_all(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iter: usize, l1: f64) -> TraceRecord {
        TraceRecord {
            iter,
            l1_policy_error: l1,
            linf_value_error: 2.0 * l1,
            min_residual: -1.0,
            objective: 0.0,
            negative_residual: l1 > 1.0,
            samples_consumed: 0,
        }
    }

    #[test]
    fn percentiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.5), 3.0);
        assert!((percentile(&xs, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn aggregate_mean_matches_recomputation() {
        let a: Vec<_> = (1..=4).map(|k| record(k, k as f64)).collect();
        let b: Vec<_> = (1..=3).map(|k| record(k, 0.5 * k as f64)).collect();
        let rows = aggregate(&[&a, &b]);
        assert_eq!(rows.len(), 4);
        for row in &rows[..3] {
            let expected = (row.iter as f64 + 0.5 * row.iter as f64) / 2.0;
            assert_eq!(row.runs, 2);
            assert!((row.l1_mean - expected).abs() < 1e-15);
            assert!((row.linf_mean - 2.0 * expected).abs() < 1e-15);
        }
        assert_eq!(rows[3].runs, 1);
        assert_eq!(rows[1].negative_fraction, 0.5);
    }
}
