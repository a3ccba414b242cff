//! Experiment configuration: TOML schema, defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vac_core::instances::{random_mdp, read_mdp, ring_mdp, torus_mdp, RingSpec, StateGeometry, TorusSpec};
use vac_core::model_free::NextStateMode;
use vac_core::npg::NpgParams;
use vac_core::{FiniteMdp, HyperParams, Variant};

pub const DEFAULT_GAMMA: f64 = 0.9;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_BATCH: usize = 1000;
pub const DEFAULT_BATCHES: usize = 1000;
pub const MODEL_BASED_STRIDE: usize = 10;

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpConfig {
    Ring {
        n: usize,
        #[serde(default)]
        sigma: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    Torus {
        n1: usize,
        n2: usize,
        #[serde(default)]
        sigma: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    Random {
        n_states: usize,
        n_actions: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ModelBased,
    ModelFree,
    VFormulation,
    Npg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ModelBased => "model_based",
            Method::ModelFree => "model_free",
            Method::VFormulation => "v_formulation",
            Method::Npg => "npg",
        }
    }

    fn uses_samples(self) -> bool {
        self != Method::ModelBased
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Vanilla,
    Clipping,
    Flipping,
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::Vanilla => Variant::Vanilla,
            VariantName::Clipping => Variant::Clipping,
            VariantName::Flipping => Variant::Flipping,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Exact,
    Bff,
    Resample,
}

impl From<ModeName> for NextStateMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Exact => NextStateMode::Exact,
            ModeName::Bff => NextStateMode::Bff,
            ModeName::Resample => NextStateMode::Resample,
        }
    }
}

/// Which optimum the error columns are measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    #[default]
    Optimal,
    Regularized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Uniform,
    Perturbed,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub method: Method,
    pub variant: Option<VariantName>,
    pub beta: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    pub eta_v: Option<f64>,
    pub eta_pi: Option<f64>,
    pub eta_q: Option<f64>,
    /// Trajectory length `T`.
    #[serde(alias = "T")]
    pub horizon: Option<usize>,
    /// Batch size `M`.
    #[serde(alias = "M")]
    pub batch_size: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub next_state_mode: Option<ModeName>,
    pub eps: Option<f64>,
    pub outer_iterations: Option<usize>,
    #[serde(default)]
    pub reference: ReferenceKind,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub stride: Option<usize>,
    #[serde(default)]
    pub init: InitKind,
    /// Replay this trajectory file instead of generating one per seed.
    pub trajectory: Option<PathBuf>,
}

/// Everything needed to launch the runs, with defaults resolved.
#[derive(Clone, Debug)]
pub struct Plan {
    pub mdp: FiniteMdp,
    pub geometry: Option<StateGeometry>,
    pub method: Method,
    pub params: HyperParams,
    pub npg: Option<NpgParams>,
    pub horizon: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub mode: NextStateMode,
    pub outer_iterations: usize,
    pub reference: ReferenceKind,
    pub seeds: Vec<u64>,
    pub stride: usize,
    pub init: InitKind,
    pub trajectory: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub enum ConfigError {
    Read(PathBuf, std::io::Error),
    Syntax(String),
    Invalid(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read(path, e) => write!(f, "cannot read {}: {e}", path.display()),
            ConfigError::Syntax(msg) => write!(f, "malformed config: {msg}"),
            ConfigError::Invalid(problems) => {
                write!(f, "invalid config:")?;
                for p in problems {
                    write!(f, "\n  - {p}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn read_config(path: &Path) -> Result<(ExperimentConfig, String), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
    let config = parse_config(&text)?;
    Ok((config, text))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
}

fn positive(problems: &mut Vec<String>, name: &str, x: f64) {
    if !(x > 0.0 && x.is_finite()) {
        problems.push(format!("{name} must be positive and finite, got {x}"));
    }
}

fn build_mdp(cfg: &MdpConfig, base: &Path, problems: &mut Vec<String>) -> Option<(FiniteMdp, Option<StateGeometry>)> {
    let built = match cfg {
        MdpConfig::Ring { n, sigma, gamma } => {
            let spec = RingSpec { n: *n, sigma: *sigma, gamma: *gamma };
            ring_mdp(&spec).map(|m| (m, Some(spec.geometry())))
        }
        MdpConfig::Torus { n1, n2, sigma, gamma } => {
            let spec = TorusSpec { n1: *n1, n2: *n2, sigma: *sigma, gamma: *gamma };
            torus_mdp(&spec).map(|m| (m, Some(spec.geometry())))
        }
        MdpConfig::Random { n_states, n_actions, gamma, seed } => {
            random_mdp(*n_states, *n_actions, *gamma, *seed).map(|m| (m, None))
        }
        MdpConfig::File { path } => read_mdp(&base.join(path)).map(|m| (m, None)),
    };
    built.map_err(|e| problems.push(format!("mdp: {e}"))).ok()
}

impl ExperimentConfig {
    /// Resolves defaults and validates every field, reporting all problems at once.
    ///
    /// Relative paths are taken relative to `base`, normally the config file's directory.
    pub fn plan(&self, base: &Path, seed_override: &[u64]) -> Result<Plan, ConfigError> {
        let mut problems = Vec::new();
        let mut warnings = Vec::new();
        let alg = &self.algorithm;
        let method = alg.method;
        let built = build_mdp(&self.mdp, base, &mut problems);

        if !(alg.lambda >= 0.0 && alg.lambda.is_finite()) {
            problems.push(format!("algorithm.lambda must be non-negative, got {}", alg.lambda));
        }
        let beta = match (method, alg.beta) {
            (Method::Npg, Some(_)) => {
                warnings.push("algorithm.beta is ignored by npg".into());
                1.0
            }
            (Method::Npg, None) => 1.0,
            (_, Some(b)) => {
                positive(&mut problems, "algorithm.beta", b);
                b
            }
            (_, None) => {
                problems.push(format!("algorithm.beta is required for {}", method.name()));
                1.0
            }
        };
        for (name, eta) in [("eta_v", alg.eta_v), ("eta_pi", alg.eta_pi), ("eta_q", alg.eta_q)] {
            if let Some(x) = eta {
                if !(x >= 0.0 && x.is_finite()) {
                    problems.push(format!("algorithm.{name} must be non-negative, got {x}"));
                }
            }
        }
        if let Some(tol) = alg.tol {
            if tol.is_nan() || tol < 0.0 {
                problems.push(format!("algorithm.tol must be non-negative, got {tol}"));
            }
        }
        if method == Method::ModelBased {
            for (name, set) in [
                ("batch_size (M)", alg.batch_size.is_some()),
                ("horizon (T)", alg.horizon.is_some()),
                ("next_state_mode", alg.next_state_mode.is_some()),
                ("eps", alg.eps.is_some()),
                ("outer_iterations", alg.outer_iterations.is_some()),
            ] {
                if set {
                    warnings.push(format!("algorithm.{name} is ignored for model-based runs"));
                }
            }
            if self.run.trajectory.is_some() {
                warnings.push("run.trajectory is ignored for model-based runs".into());
            }
        } else {
            if alg.max_iters.is_some() {
                warnings.push(format!("algorithm.max_iters is ignored by {}; the trajectory length bounds the run", method.name()));
            }
            if self.run.init != InitKind::Uniform {
                warnings.push("run.init only affects model-based runs".into());
            }
        }
        if method != Method::Npg && (alg.eps.is_some() || alg.outer_iterations.is_some()) && method != Method::ModelBased {
            warnings.push("algorithm.eps and algorithm.outer_iterations only apply to npg".into());
        }
        if method == Method::Npg && alg.variant.is_some() {
            warnings.push("algorithm.variant is ignored by npg".into());
        }

        let batch_size = alg.batch_size.unwrap_or(DEFAULT_BATCH);
        if batch_size == 0 {
            problems.push("algorithm.batch_size must be at least 1".into());
        }
        let horizon = alg.horizon.unwrap_or(DEFAULT_BATCHES * batch_size + 1);
        if method.uses_samples() && horizon < batch_size + 2 {
            problems.push(format!("algorithm.horizon must be at least batch_size + 2 = {}", batch_size + 2));
        }
        let max_iters = alg.max_iters.unwrap_or(DEFAULT_MAX_ITERS);
        if max_iters == 0 {
            problems.push("algorithm.max_iters must be at least 1".into());
        }
        let stride = self.run.stride.unwrap_or(if method == Method::ModelBased { MODEL_BASED_STRIDE } else { 1 });
        if stride == 0 {
            problems.push("run.stride must be at least 1".into());
        }
        let seeds = if seed_override.is_empty() {
            self.run.seeds.clone().unwrap_or_else(|| vec![0])
        } else {
            seed_override.to_vec()
        };
        if seeds.is_empty() {
            problems.push("run.seeds must not be empty".into());
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            problems.push("run.seeds contains duplicates".into());
        }

        let Some((mdp, geometry)) = built else {
            return Err(ConfigError::Invalid(problems));
        };
        let cells = (mdp.n_states() * mdp.n_actions()) as f64;
        let variant: Variant = alg.variant.unwrap_or(VariantName::Flipping).into();
        let params = match method {
            Method::ModelBased => {
                let d = 1.0 / (4.0 * beta);
                HyperParams {
                    eta_v: alg.eta_v.unwrap_or(d),
                    eta_pi: alg.eta_pi.unwrap_or(d),
                    eta_q: alg.eta_q.unwrap_or(d),
                    ..HyperParams::model_based(beta, alg.lambda, variant)
                }
            }
            _ => {
                let c = beta * cells;
                let eta_q = alg.eta_q.unwrap_or(30.0 / c);
                HyperParams {
                    beta,
                    lambda: alg.lambda,
                    eta_v: alg.eta_v.unwrap_or(eta_q),
                    eta_pi: alg.eta_pi.unwrap_or(4.0 / c),
                    eta_q,
                    batch_size,
                    variant,
                }
            }
        };
        let npg = (method == Method::Npg).then(|| NpgParams {
            lambda: alg.lambda,
            eta_pi: alg.eta_pi.unwrap_or(0.1),
            eta_q: alg.eta_q.unwrap_or(4.0),
            batch_size,
            eps: alg.eps.unwrap_or(2e-4),
        });
        if let Some(p) = &npg {
            if let Err(e) = p.validate(mdp.gamma()) {
                problems.push(format!("npg: {e}"));
            }
        }

        let noisy = !mdp.is_deterministic();
        let mode = match alg.next_state_mode {
            Some(m) => NextStateMode::from(m),
            None if method == Method::VFormulation => {
                if geometry.is_some() { NextStateMode::Bff } else { NextStateMode::Resample }
            }
            None if noisy && geometry.is_some() => NextStateMode::Bff,
            None => NextStateMode::Exact,
        };
        if method.uses_samples() {
            if mode == NextStateMode::Bff && geometry.is_none() {
                problems.push("next_state_mode = \"bff\" needs a ring or torus mdp".into());
            }
            if mode == NextStateMode::Exact && method == Method::VFormulation {
                problems.push("v_formulation needs next_state_mode \"bff\" or \"resample\"".into());
            }
            if mode == NextStateMode::Exact && noisy {
                warnings.push("exact next-state mode on stochastic dynamics gives biased gradients".into());
            }
        }
        if alg.reference == ReferenceKind::Regularized && alg.lambda == 0.0 {
            problems.push("reference = \"regularized\" needs lambda > 0".into());
        }

        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        Ok(Plan {
            mdp,
            geometry,
            method,
            params,
            npg,
            horizon,
            max_iters,
            tol: alg.tol.unwrap_or(DEFAULT_TOL),
            mode,
            outer_iterations: alg.outer_iterations.unwrap_or(usize::MAX),
            reference: alg.reference,
            seeds,
            stride,
            init: self.run.init,
            trajectory: self.run.trajectory.as_ref().map(|p| base.join(p)),
            out: self.run.out.as_ref().map(|p| base.join(p)),
            warnings,
        })
    }
}
