//! Exact reference solutions, action gaps and prefactor thresholds.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VacError};
use crate::mdp::{argmax_row, FiniteMdp, Policy, StateDistribution, ValueVector};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 1_000_000;

/// Optimal (or entropy-regularized optimal) value and policy.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSolution {
    pub v_star: ValueVector,
    /// One-hot at `greedy_actions` for the unregularized problem; the soft-max
    /// optimal policy when regularized.
    pub pi_star: Policy,
    pub greedy_actions: Vec<usize>,
}

fn stop_threshold(gamma: f64, tol: f64) -> f64 {
    tol * (1.0 - gamma) / (2.0 * gamma)
}

fn iterate_to_fixed_point<F>(mdp: &FiniteMdp, tol: f64, mut backup: F) -> Result<ValueVector>
where
    F: FnMut(&DMatrix<f64>, usize) -> f64,
{
    if !(tol > 0.0) {
        return Err(VacError::invalid(format!("tol must be positive, got {tol}")));
    }
    let threshold = stop_threshold(mdp.gamma(), tol);
    let mut v = DVector::zeros(mdp.n_states());
    for _ in 0..MAX_ITERATIONS {
        let q = mdp.lookahead(&v);
        let next = DVector::from_fn(mdp.n_states(), |s, _| backup(&q, s));
        let delta = (&next - &v).amax();
        v = next;
        if !delta.is_finite() {
            return Err(VacError::Numerical("value iteration produced non-finite values".into()));
        }
        if delta <= threshold {
            return Ok(v);
        }
    }
    Err(VacError::Numerical(format!(
        "value iteration exceeded {MAX_ITERATIONS} sweeps"
    )))
}

/// Optimal values `V*` by value iteration, with `||V - V*||_inf <= tol` on return.
///
/// Greedy actions break ties toward the lowest action index.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<OptimalSolution> {
    let v = iterate_to_fixed_point(mdp, tol, |q, s| q.row(s).max())?;
    let q = mdp.lookahead(&v);
    let greedy: Vec<usize> = (0..mdp.n_states()).map(|s| argmax_row(&q, s)).collect();
    Ok(OptimalSolution {
        pi_star: Policy::deterministic(&greedy, mdp.n_actions()),
        greedy_actions: greedy,
        v_star: v,
    })
}

fn log_sum_exp_scaled(q: &DMatrix<f64>, s: usize, lambda: f64) -> f64 {
    let max = q.row(s).max();
    let sum: f64 = q.row(s).iter().map(|x| ((x - max) / lambda).exp()).sum();
    max + lambda * sum.ln()
}

/// Entropy-regularized optimum `V*_lambda` and `pi*_lambda ∝ exp(q / lambda)`.
pub fn soft_value_iteration(mdp: &FiniteMdp, lambda: f64, tol: f64) -> Result<OptimalSolution> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(VacError::invalid(format!(
            "soft value iteration needs lambda > 0 (got {lambda}); use value_iteration for lambda = 0"
        )));
    }
    let v = iterate_to_fixed_point(mdp, tol, |q, s| log_sum_exp_scaled(q, s, lambda))?;
    let q = mdp.lookahead(&v);
    Ok(OptimalSolution {
        pi_star: soft_greedy(&q, lambda),
        greedy_actions: (0..mdp.n_states()).map(|s| argmax_row(&q, s)).collect(),
        v_star: v,
    })
}

/// Row-wise `softmax(q / lambda)`.
pub fn soft_greedy(q: &DMatrix<f64>, lambda: f64) -> Policy {
    let logits = q / lambda;
    crate::mdp::policy_from_logits(&logits).expect("finite lookahead gives finite logits")
}

/// Smallest advantage of the best action over the runner-up, evaluated at `v_star`.
pub fn action_gap(mdp: &FiniteMdp, v_star: &ValueVector) -> Result<f64> {
    if mdp.n_actions() < 2 {
        return Err(VacError::invalid("action gap needs at least two actions"));
    }
    mdp.check_values(v_star)?;
    let q = mdp.lookahead(v_star);
    let mut gap = f64::INFINITY;
    for s in 0..mdp.n_states() {
        let best = argmax_row(&q, s);
        let runner_up = (0..mdp.n_actions())
            .filter(|&a| a != best)
            .map(|a| q[(s, a)])
            .fold(f64::NEG_INFINITY, f64::max);
        gap = gap.min(q[(s, best)] - runner_up);
    }
    Ok(gap)
}

/// Prefactor threshold `(1 / min_s rho_s) / (alpha (1 - gamma)^2)`.
///
/// Uniform `rho` gives `|S| / ((1 - gamma)^2 alpha)`.
pub fn beta_threshold(mdp: &FiniteMdp, alpha: f64, rho: &StateDistribution) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(VacError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if rho.len() != mdp.n_states() {
        return Err(VacError::shape("state distribution", mdp.n_states(), rho.len()));
    }
    let g = mdp.gamma();
    Ok((1.0 / rho.min()) / (alpha * (1.0 - g) * (1.0 - g)))
}

/// Checks `0 < alpha < gap / 3`, the range where the prefactor threshold guarantees the optimal policy.
pub fn check_alpha(alpha: f64, gap: f64) -> Result<()> {
    if !(alpha > 0.0) {
        return Err(VacError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(alpha < gap / 3.0) {
        return Err(VacError::invalid(format!(
            "alpha = {alpha} must be below a third of the action gap {gap}"
        )));
    }
    Ok(())
}

/// Per-state `KL(p_s || q_s)`; `0 log 0 = 0`, infinite where `q` lacks support.
pub fn kl_divergence(p: &Policy, q: &Policy) -> DVector<f64> {
    DVector::from_fn(p.n_states(), |s, _| {
        (0..p.n_actions())
            .map(|a| {
                let (x, y) = (p.prob(s, a), q.prob(s, a));
                if x == 0.0 {
                    0.0
                } else if y == 0.0 {
                    f64::INFINITY
                } else {
                    x * (x / y).ln()
                }
            })
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bandit(rewards: &[f64], gamma: f64) -> FiniteMdp {
        let m = rewards.len();
        FiniteMdp::new(
            vec![DMatrix::identity(1, 1); m],
            DMatrix::from_row_slice(1, m, rewards),
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn geometric_series() {
        let sol = value_iteration(&bandit(&[1.0], 0.5), 1e-12).unwrap();
        assert_relative_eq!(sol.v_star[0], 2.0, epsilon = 1e-11);
    }

    #[test]
    fn myopic_limit_picks_best_reward() {
        let p0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let p1 = DMatrix::identity(2, 2);
        let r = DMatrix::from_row_slice(2, 2, &[0.2, 0.7, 0.9, 0.1]);
        let mdp = FiniteMdp::new(vec![p0, p1], r, 1e-9).unwrap();
        let sol = value_iteration(&mdp, 1e-10).unwrap();
        assert_eq!(sol.greedy_actions, vec![1, 0]);
        assert_relative_eq!(sol.v_star[0], 0.7, epsilon = 1e-8);
        assert_relative_eq!(sol.v_star[1], 0.9, epsilon = 1e-8);
    }

    #[test]
    fn soft_bandit_closed_form() {
        let sol = soft_value_iteration(&bandit(&[1.0, 0.0], 1e-9), 1.0, 1e-12).unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(sol.pi_star.prob(0, 0), e / (1.0 + e), epsilon = 1e-8);
        assert_relative_eq!(sol.pi_star.prob(0, 1), 1.0 / (1.0 + e), epsilon = 1e-8);
    }

    #[test]
    fn soft_large_lambda_is_uniform() {
        let mdp = crate::instances::random_mdp(4, 3, 0.9, 3).unwrap();
        let sol = soft_value_iteration(&mdp, 1e6, 1e-6).unwrap();
        for p in sol.pi_star.matrix().iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn soft_rejects_zero_lambda() {
        assert!(soft_value_iteration(&bandit(&[1.0, 0.0], 0.5), 0.0, 1e-8).is_err());
    }

    #[test]
    fn gap_cases() {
        let g = action_gap(&bandit(&[1.0, 0.0], 1e-9), &DVector::from_element(1, 0.0)).unwrap();
        assert_relative_eq!(g, 1.0, epsilon = 1e-12);
        let mdp = bandit(&[0.5, 0.5], 0.9);
        let sol = value_iteration(&mdp, 1e-10).unwrap();
        assert_eq!(action_gap(&mdp, &sol.v_star).unwrap(), 0.0);
        assert!(action_gap(&bandit(&[1.0], 0.5), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn threshold_values() {
        let mdp = crate::instances::random_mdp(5, 2, 0.9, 1).unwrap();
        let b = beta_threshold(&mdp, 0.1, &StateDistribution::uniform(5)).unwrap();
        assert_relative_eq!(b, 5000.0, max_relative = 1e-12);

        let mdp2 = crate::instances::random_mdp(2, 2, 0.5, 1).unwrap();
        let rho = StateDistribution::new(DVector::from_vec(vec![0.7, 0.3])).unwrap();
        let b = beta_threshold(&mdp2, 0.2, &rho).unwrap();
        assert_relative_eq!(b, (1.0 / 0.3) / (0.2 * 0.25), max_relative = 1e-12);
        assert_relative_eq!(b, 66.666_666_666_666_67, max_relative = 1e-12);

        let general = beta_threshold(&mdp, 0.1, &StateDistribution::new(DVector::from_element(5, 0.2)).unwrap()).unwrap();
        assert_relative_eq!(general, 5000.0, max_relative = 1e-12);

        assert!(beta_threshold(&mdp, 0.0, &StateDistribution::uniform(5)).is_err());
        assert!(check_alpha(0.1, 0.2).is_err());
        assert!(check_alpha(0.05, 0.2).is_ok());
    }

    #[test]
    fn kl_zero_on_identical() {
        let p = Policy::uniform(3, 2);
        assert!(kl_divergence(&p, &p).iter().all(|&x| x == 0.0));
        let one_hot = Policy::deterministic(&[0, 1, 0], 2);
        let kl = kl_divergence(&one_hot, &p);
        assert_relative_eq!(kl[0], std::f64::consts::LN_2, epsilon = 1e-15);
    }
}
