//! Self-check suites run by `vac verify`.

use clap::ValueEnum;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vac_core::instances::{random_mdp, ring_mdp, RingSpec};
use vac_core::mdp::{bellman_residual, discounted_generator, objective, policy_from_logits, policy_value};
use vac_core::model_based::{fixed_point_values, grad_theta, grad_v, run_model_based, MbState, RunOptions};
use vac_core::oracle::{action_gap, beta_threshold, kl_divergence, soft_value_iteration, value_iteration};
use vac_core::{HyperParams, Policy, Reference, StateDistribution, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Value iteration against exhaustive policy enumeration.
    Oracle,
    /// Analytic gradients against central finite differences.
    Gradients,
    /// Residual at the value fixed point of random policies.
    FixedPoint,
    /// Flipping above the prefactor threshold recovers the optimal policy.
    Threshold,
    /// Entropy-regularized fixed-point bounds on the 5-state ring.
    Regularized,
    All,
}

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn rng_logits(rng: &mut ChaCha8Rng, n: usize, m: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.gen_range(-scale..scale))
}

fn oracle() -> Check {
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for seed in 0..20u64 {
        let (n, m) = (1 + seed as usize % 4, 1 + seed as usize / 4 % 3);
        let mdp = random_mdp(n, m, 0.9, seed).expect("instance");
        let sol = value_iteration(&mdp, 1e-12).expect("value iteration");
        let mut best = DVector::from_element(n, f64::NEG_INFINITY);
        let mut best_actions = Vec::new();
        for code in 0..m.pow(n as u32) {
            let actions: Vec<usize> = (0..n).map(|s| code / m.pow(s as u32) % m).collect();
            let v = policy_value(&mdp, &Policy::deterministic(&actions, m), 0.0).expect("evaluation");
            if v.iter().zip(best.iter()).all(|(a, b)| a >= b) && v != best {
                best = v;
                best_actions = actions;
            }
        }
        worst = worst.max((&best - &sol.v_star).amax());
        mismatches += usize::from(best_actions != sol.greedy_actions);
    }
    Check {
        name: "oracle",
        pass: worst <= 1e-8 && mismatches == 0,
        detail: format!("max value gap {worst:.2e}, argmax mismatches {mismatches}/20"),
    }
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let (n, m) = (2 + seed as usize % 4, 2 + seed as usize % 2);
        let mdp = random_mdp(n, m, 0.9, 100 + seed).expect("instance");
        let theta = rng_logits(&mut rng, n, m, 1.5);
        let v = DVector::from_iterator(n, rng_logits(&mut rng, n, 1, 3.0).iter().copied());
        let rho = StateDistribution::uniform(n);
        let params = HyperParams::model_based(2.0, 0.1 * (seed % 3) as f64, Variant::Vanilla);
        let pi = policy_from_logits(&theta).expect("policy");
        let e = |v: &DVector<f64>, th: &DMatrix<f64>| {
            objective(&mdp, v, &policy_from_logits(th).expect("policy"), &rho, params.beta, params.lambda).expect("objective")
        };
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-3);
        let gv = grad_v(&mdp, &v, &pi, &rho, &params).expect("grad_v");
        let gt = grad_theta(&mdp, &v, &pi, &rho, &params, Variant::Vanilla).expect("grad_theta");
        for s in 0..n {
            let mut dv = DVector::zeros(n);
            dv[s] = h;
            worst = worst.max(rel(gv[s], (e(&(&v + &dv), &theta) - e(&(&v - &dv), &theta)) / (2.0 * h)));
            let avg: f64 = (0..m).map(|a| pi.prob(s, a) * gt[(s, a)]).sum();
            for b in 0..m {
                let mut dt = DMatrix::zeros(n, m);
                dt[(s, b)] = h;
                let fd = (e(&v, &(&theta + &dt)) - e(&v, &(&theta - &dt))) / (2.0 * h);
                worst = worst.max(rel(pi.prob(s, b) * (gt[(s, b)] - avg), fd));
            }
        }
    }
    Check {
        name: "gradients",
        pass: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e}"),
    }
}

fn fixed_point() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut min_res = f64::INFINITY;
    for seed in 0..20u64 {
        let (n, m) = (2 + seed as usize % 5, 2);
        let mdp = random_mdp(n, m, 0.9, 200 + seed).expect("instance");
        let pi = policy_from_logits(&rng_logits(&mut rng, n, m, 2.0)).expect("policy");
        let rho = StateDistribution::uniform(n);
        let params = HyperParams::model_based(5.0, 0.1, Variant::Flipping);
        let v = fixed_point_values(&mdp, &pi, &rho, &params).expect("fixed point");
        let ell = bellman_residual(&mdp, &v, &pi, params.lambda).expect("residual");
        let a = discounted_generator(&mdp, &pi).expect("generator");
        let y = a.transpose().lu().solve(rho.weights()).expect("solve");
        let target = y.component_div(rho.weights()) / params.beta;
        worst = worst.max((&ell - target).amax());
        min_res = min_res.min(ell.min());
    }
    Check {
        name: "fixed-point",
        pass: worst <= 1e-9 && min_res > 0.0,
        detail: format!("max deviation {worst:.2e}, min residual {min_res:.3e}"),
    }
}

fn threshold() -> Check {
    let mut hits = 0;
    let total = 6;
    for seed in 0..total as u64 {
        let (n, m) = (2 + seed as usize % 3, 2);
        let mdp = random_mdp(n, m, 0.5, 300 + seed).expect("instance");
        let sol = value_iteration(&mdp, 1e-13).expect("value iteration");
        let alpha = action_gap(&mdp, &sol.v_star).expect("gap") / 4.0;
        let rho = StateDistribution::uniform(n);
        let beta = 2.0 * beta_threshold(&mdp, alpha, &rho).expect("threshold");
        let params = HyperParams::model_based(beta, 0.0, Variant::Flipping);
        let mut options = RunOptions::new(2_000_000);
        options.stride = 100_000;
        options.stop.value_tol = 1e-4;
        let reference = Reference {
            pi_star: sol.pi_star.clone(),
            v_star: sol.v_star.clone(),
        };
        let run = run_model_based(&mdp, &rho, &params, MbState::initial(n, m), &options, &reference).expect("run");
        let greedy = run.state.theta.policy_greedy();
        let v_inf = fixed_point_values(&mdp, &Policy::deterministic(&greedy, m), &rho, &params).expect("fixed point");
        hits += usize::from(greedy == sol.greedy_actions && (&v_inf - &sol.v_star).amax() <= alpha);
    }
    Check {
        name: "threshold",
        pass: hits == total,
        detail: format!("optimal policy and value recovered in {hits}/{total}"),
    }
}

fn regularized() -> Check {
    let (n, lambda, eps, gamma) = (5usize, 0.1, 0.05, 0.9);
    let mdp = ring_mdp(&RingSpec { n, sigma: 0.0, gamma }).expect("ring");
    let soft = soft_value_iteration(&mdp, lambda, 1e-13).expect("soft value iteration");
    let beta = 4.0 * n as f64 / (eps * (1.0 - gamma).powi(2));
    let rho = StateDistribution::uniform(n);
    let params = HyperParams::model_based(beta, lambda, Variant::Flipping);
    let mut options = RunOptions::new(20_000_000);
    options.stride = 1_000_000;
    options.stop.greedy_window = None;
    options.stop.tol = 0.0;
    let reference = Reference {
        pi_star: soft.pi_star.clone(),
        v_star: soft.v_star.clone(),
    };
    let run = run_model_based(&mdp, &rho, &params, MbState::initial(n, 2), &options, &reference).expect("run");
    let diff = &run.state.v - &soft.v_star;
    let bound = n as f64 / (beta * (1.0 - gamma).powi(2));
    let kl = kl_divergence(&soft.pi_star, &run.state.theta.policy()).max();
    Check {
        name: "regularized",
        pass: diff.min() > 0.0 && diff.max() < bound && kl <= eps * gamma / lambda,
        detail: format!("value gap in [{:.3e}, {:.3e}] below {bound:.3e}, max KL {kl:.3e}", diff.min(), diff.max()),
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    let all: [(Suite, fn() -> Check); 5] = [
        (Suite::Oracle, oracle),
        (Suite::Gradients, gradients),
        (Suite::FixedPoint, fixed_point),
        (Suite::Threshold, threshold),
        (Suite::Regularized, regularized),
    ];
    all.iter().filter(|(s, _)| suite == Suite::All || *s == suite).map(|(_, f)| f()).collect()
}
