//! Benchmark MDPs: the 1D ring, the 2D torus, and seeded random instances.
//!
//! States are integer indices. On the ring, state `k` sits at angle
//! `2 pi k / n`; the continuous move `k + a + sigma Z` is wrapped mod `n`
//! and rounded to the nearest index, with `[n - 1/2, n)` rounding to 0.
//! For `sigma > 0` the exact transition row integrates the normal density
//! over each rounding bin (truncated at 8 sigma, then renormalized).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use crate::error::{Result, VacError};
use crate::mdp::FiniteMdp;
use crate::oracle;

const TRUNCATION: f64 = 8.0;
const GAP_RETRIES: u64 = 100;
/// Smallest action gap accepted by [`random_mdp`].
pub const MIN_ACTION_GAP: f64 = 1e-6;

/// 1D ring: `n` states, actions `{+1, -1}` (indices 0 and 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RingSpec {
    pub n: usize,
    pub sigma: f64,
    pub gamma: f64,
}

/// 2D torus `n1 x n2`, actions `(+1,0), (-1,0), (0,+1), (0,-1)` in that order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusSpec {
    pub n1: usize,
    pub n2: usize,
    pub sigma: f64,
    pub gamma: f64,
}

pub const RING_MOVES: [i64; 2] = [1, -1];
pub const TORUS_MOVES: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

/// Index geometry used to wrap displacement arithmetic (the BFF surrogate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateGeometry {
    /// Indices `0..n` with wrap-around.
    Cyclic { n: usize },
    /// Row-major `i * n2 + j`, each coordinate wrapping independently.
    Torus { n1: usize, n2: usize },
}

impl StateGeometry {
    pub fn n_states(&self) -> usize {
        match *self {
            StateGeometry::Cyclic { n } => n,
            StateGeometry::Torus { n1, n2 } => n1 * n2,
        }
    }

    /// `base + (to - from)` evaluated in the wrapped index space.
    pub fn displace(&self, base: usize, from: usize, to: usize) -> usize {
        match *self {
            StateGeometry::Cyclic { n } => {
                let n = n as i64;
                (base as i64 + to as i64 - from as i64).rem_euclid(n) as usize
            }
            StateGeometry::Torus { n1, n2 } => {
                let (bi, bj) = (base / n2, base % n2);
                let (fi, fj) = (from / n2, from % n2);
                let (ti, tj) = (to / n2, to % n2);
                let i = (bi as i64 + ti as i64 - fi as i64).rem_euclid(n1 as i64) as usize;
                let j = (bj as i64 + tj as i64 - fj as i64).rem_euclid(n2 as i64) as usize;
                i * n2 + j
            }
        }
    }

    /// Number of actions with a known drift: the ring moves or the torus moves.
    pub fn n_moves(&self) -> usize {
        match self {
            StateGeometry::Cyclic { .. } => RING_MOVES.len(),
            StateGeometry::Torus { .. } => TORUS_MOVES.len(),
        }
    }

    fn drift(&self, action: usize) -> (i64, i64) {
        match self {
            StateGeometry::Cyclic { .. } => (RING_MOVES[action], 0),
            StateGeometry::Torus { .. } => TORUS_MOVES[action],
        }
    }

    fn offset(&self, base: usize, (di, dj): (i64, i64)) -> usize {
        match *self {
            StateGeometry::Cyclic { n } => (base as i64 + di).rem_euclid(n as i64) as usize,
            StateGeometry::Torus { n1, n2 } => {
                let i = ((base / n2) as i64 + di).rem_euclid(n1 as i64) as usize;
                let j = ((base % n2) as i64 + dj).rem_euclid(n2 as i64) as usize;
                i * n2 + j
            }
        }
    }

    /// Second next state for `(s_t, a_t)`: the drift of `a_t` plus the noise seen on the
    /// following step, `s_{t+2} - s_{t+1} - drift(a_{t+1})`.
    ///
    /// Reduces to `s_t + (s_{t+2} - s_{t+1})` when `a_t = a_{t+1}` and to the exact next
    /// state when the dynamics are noiseless.
    pub fn borrow_noise(&self, state: usize, action: usize, next: usize, next_action: usize, after: usize) -> usize {
        let (a, b) = (self.drift(action), self.drift(next_action));
        self.offset(self.displace(state, next, after), (a.0 - b.0, a.1 - b.1))
    }
}

impl RingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(VacError::invalid(format!("ring needs n >= 2, got {}", self.n)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(VacError::invalid(format!("ring sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(VacError::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn geometry(&self) -> StateGeometry {
        StateGeometry::Cyclic { n: self.n }
    }

    /// `1 + sin(2 pi k / n)`.
    pub fn reward(&self, k: usize) -> f64 {
        1.0 + (2.0 * PI * k as f64 / self.n as f64).sin()
    }
}

impl TorusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 2 || self.n2 < 2 {
            return Err(VacError::invalid(format!(
                "torus needs n1, n2 >= 2, got {}x{}",
                self.n1, self.n2
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(VacError::invalid(format!("torus sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(VacError::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn geometry(&self) -> StateGeometry {
        StateGeometry::Torus { n1: self.n1, n2: self.n2 }
    }

    /// `2 + sin(2 pi i / n1) + cos(2 pi j / n2)`.
    pub fn reward(&self, i: usize, j: usize) -> f64 {
        2.0 + (2.0 * PI * i as f64 / self.n1 as f64).sin() + (2.0 * PI * j as f64 / self.n2 as f64).cos()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Distribution of `round_wrap(center + sigma Z)` over `0..n`.
fn wrapped_rounding_row(center: f64, sigma: f64, n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    if sigma == 0.0 {
        let idx = (center + 0.5).floor() as i64;
        row[idx.rem_euclid(n as i64) as usize] = 1.0;
        return row;
    }
    let lo = center - TRUNCATION * sigma;
    let hi = center + TRUNCATION * sigma;
    let first = (lo + 0.5).floor() as i64;
    let last = (hi + 0.5).floor() as i64;
    for j in first..=last {
        let a = ((j as f64 - 0.5).max(lo) - center) / sigma;
        let b = ((j as f64 + 0.5).min(hi) - center) / sigma;
        if b <= a {
            continue;
        }
        row[j.rem_euclid(n as i64) as usize] += std_normal_cdf(b) - std_normal_cdf(a);
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    row
}

/// The 1D ring MDP.
pub fn ring_mdp(spec: &RingSpec) -> Result<FiniteMdp> {
    spec.validate()?;
    let n = spec.n;
    let transitions = RING_MOVES
        .iter()
        .map(|&mv| {
            let mut p = DMatrix::zeros(n, n);
            for k in 0..n {
                let row = wrapped_rounding_row(k as f64 + mv as f64, spec.sigma, n);
                for (t, x) in row.into_iter().enumerate() {
                    p[(k, t)] = x;
                }
            }
            p
        })
        .collect();
    let rewards = DMatrix::from_fn(n, RING_MOVES.len(), |k, _| spec.reward(k));
    FiniteMdp::new(transitions, rewards, spec.gamma)
}

/// The 2D torus MDP, state index `i * n2 + j`.
pub fn torus_mdp(spec: &TorusSpec) -> Result<FiniteMdp> {
    spec.validate()?;
    let (n1, n2) = (spec.n1, spec.n2);
    let n = n1 * n2;
    let transitions = TORUS_MOVES
        .iter()
        .map(|&(di, dj)| {
            let mut p = DMatrix::zeros(n, n);
            for i in 0..n1 {
                for j in 0..n2 {
                    let s = i * n2 + j;
                    // only the moved coordinate carries noise
                    if di != 0 {
                        let row = wrapped_rounding_row(i as f64 + di as f64, spec.sigma, n1);
                        for (ti, x) in row.into_iter().enumerate() {
                            p[(s, ti * n2 + j)] += x;
                        }
                    } else {
                        let row = wrapped_rounding_row(j as f64 + dj as f64, spec.sigma, n2);
                        for (tj, x) in row.into_iter().enumerate() {
                            p[(s, i * n2 + tj)] += x;
                        }
                    }
                }
            }
            p
        })
        .collect();
    let rewards = DMatrix::from_fn(n, TORUS_MOVES.len(), |s, _| spec.reward(s / n2, s % n2));
    FiniteMdp::new(transitions, rewards, spec.gamma)
}

fn random_mdp_once(n_states: usize, n_actions: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Result<FiniteMdp> {
    let transitions = (0..n_actions)
        .map(|_| {
            let mut p = DMatrix::zeros(n_states, n_states);
            for s in 0..n_states {
                // strictly positive variates, normalized per row
                let w: Vec<f64> = (0..n_states).map(|_| 1.0 - rng.gen::<f64>()).collect();
                let total: f64 = w.iter().sum();
                for (t, x) in w.into_iter().enumerate() {
                    p[(s, t)] = x / total;
                }
            }
            p
        })
        .collect();
    let rewards = DMatrix::from_fn(n_states, n_actions, |_, _| rng.gen::<f64>());
    FiniteMdp::new(transitions, rewards, gamma)
}

/// Seeded random MDP with dense transitions and rewards in `[0, 1)`.
///
/// With two or more actions the optimal action gap must exceed
/// [`MIN_ACTION_GAP`]; failing instances are redrawn from sub-seeds
/// `seed + 1, seed + 2, ...` up to 100 times.
pub fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<FiniteMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(VacError::invalid("random MDP needs at least one state and one action"));
    }
    for retry in 0..=GAP_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(retry));
        let mdp = random_mdp_once(n_states, n_actions, gamma, &mut rng)?;
        if n_actions == 1 {
            return Ok(mdp);
        }
        let sol = oracle::value_iteration(&mdp, oracle::DEFAULT_TOL)?;
        if oracle::action_gap(&mdp, &sol.v_star)? > MIN_ACTION_GAP {
            return Ok(mdp);
        }
    }
    Err(VacError::Generation(format!(
        "no instance with a positive action gap after {GAP_RETRIES} retries (seed {seed})"
    )))
}

/// Serializes an MDP in the plain-text interchange format read by [`parse_mdp`].
pub fn format_mdp(mdp: &FiniteMdp) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# vac mdp v1");
    let _ = writeln!(out, "n_states {}", mdp.n_states());
    let _ = writeln!(out, "n_actions {}", mdp.n_actions());
    let _ = writeln!(out, "gamma {:?}", mdp.gamma());
    let _ = writeln!(out, "transitions");
    for a in 0..mdp.n_actions() {
        let p = mdp.transition(a);
        for s in 0..mdp.n_states() {
            let row: Vec<String> = (0..mdp.n_states()).map(|t| format!("{:?}", p[(s, t)])).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    let _ = writeln!(out, "rewards");
    for s in 0..mdp.n_states() {
        let row: Vec<String> = (0..mdp.n_actions()).map(|a| format!("{:?}", mdp.reward(s, a))).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

struct LineReader<'a> {
    lines: Box<dyn Iterator<Item = (usize, &'a str)> + 'a>,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        LineReader { lines: Box::new(lines) }
    }

    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.lines.next().ok_or_else(|| VacError::Parse {
            line: 0,
            message: format!("unexpected end of file while reading {what}"),
        })
    }

    fn keyword(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (no, line) = self.next_line(key)?;
        let mut parts = line.splitn(2, char::is_whitespace);
        if parts.next() != Some(key) {
            return Err(VacError::Parse {
                line: no,
                message: format!("expected `{key}`, found `{line}`"),
            });
        }
        Ok((no, parts.next().unwrap_or("").trim()))
    }

    fn value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (no, v) = self.keyword(key)?;
        v.parse().map_err(|e| VacError::Parse {
            line: no,
            message: format!("{key}: {e}"),
        })
    }

    fn row(&mut self, width: usize, what: &str) -> Result<Vec<f64>> {
        let (no, line) = self.next_line(what)?;
        let row = line
            .split_whitespace()
            .map(|x| {
                x.parse::<f64>().map_err(|e| VacError::Parse {
                    line: no,
                    message: format!("`{x}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != width {
            return Err(VacError::Parse {
                line: no,
                message: format!("expected {width} values in {what}, found {}", row.len()),
            });
        }
        Ok(row)
    }
}

/// Parses the interchange format. Comments start with `#`; blank lines are ignored.
/// The result must pass the same stochasticity checks as [`FiniteMdp::new`].
pub fn parse_mdp(text: &str) -> Result<FiniteMdp> {
    let mut reader = LineReader::new(text);
    let n: usize = reader.value("n_states")?;
    let m: usize = reader.value("n_actions")?;
    let gamma: f64 = reader.value("gamma")?;
    if n == 0 || m == 0 {
        return Err(VacError::invalid("n_states and n_actions must be positive"));
    }
    reader.keyword("transitions")?;
    let mut transitions = Vec::with_capacity(m);
    for _ in 0..m {
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for (t, x) in reader.row(n, "transitions")?.into_iter().enumerate() {
                p[(s, t)] = x;
            }
        }
        transitions.push(p);
    }
    reader.keyword("rewards")?;
    let mut rewards = DMatrix::zeros(n, m);
    for s in 0..n {
        for (a, x) in reader.row(m, "rewards")?.into_iter().enumerate() {
            rewards[(s, a)] = x;
        }
    }
    if let Ok((no, _)) = reader.next_line("trailing data") {
        return Err(VacError::Parse {
            line: no,
            message: "unexpected trailing data".into(),
        });
    }
    FiniteMdp::new(transitions, rewards, gamma)
}

/// Hex SHA-256 of the interchange text; identifies an instance in exported artifacts.
pub fn mdp_fingerprint(mdp: &FiniteMdp) -> String {
    Sha256::digest(format_mdp(mdp).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn read_mdp(path: &Path) -> Result<FiniteMdp> {
    parse_mdp(&std::fs::read_to_string(path)?)
}

pub fn write_mdp(mdp: &FiniteMdp, path: &Path) -> Result<()> {
    std::fs::write(path, format_mdp(mdp))?;
    Ok(())
}
