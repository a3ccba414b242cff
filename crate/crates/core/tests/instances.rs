use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vac_core::instances::{format_mdp, parse_mdp, random_mdp, ring_mdp, torus_mdp, RingSpec, StateGeometry, TorusSpec};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let (u, v): (f64, f64) = (1.0 - rng.gen::<f64>(), rng.gen());
    (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
}

fn wrap_round(x: f64, n: usize) -> usize {
    (x.round() as i64).rem_euclid(n as i64) as usize
}

fn total_variation(counts: &[f64], row: impl Iterator<Item = f64>) -> f64 {
    let total: f64 = counts.iter().sum();
    counts.iter().zip(row).map(|(c, p)| (c / total - p).abs()).sum::<f64>() / 2.0
}

#[test]
fn ring_matrix_matches_the_noisy_sampler() {
    let (n, sigma) = (7, 1.3);
    let mdp = ring_mdp(&RingSpec { n, sigma, gamma: 0.9 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (a, step) in [1.0, -1.0].into_iter().enumerate() {
        for k in [0, 3, 6] {
            let mut counts = vec![0.0; n];
            for _ in 0..200_000 {
                counts[wrap_round(k as f64 + step + sigma * gaussian(&mut rng), n)] += 1.0;
            }
            let tv = total_variation(&counts, mdp.transition(a).row(k).iter().copied());
            assert!(tv < 0.01, "action {a} state {k}: {tv}");
        }
    }
}

#[test]
fn torus_matrix_matches_the_noisy_sampler() {
    let (n1, n2, sigma) = (4, 5, 0.6);
    let mdp = torus_mdp(&TorusSpec { n1, n2, sigma, gamma: 0.9 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let moves = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
    for (a, (di, dj)) in moves.into_iter().enumerate() {
        let (i, j) = (1usize, 3usize);
        let mut counts = vec![0.0; n1 * n2];
        for _ in 0..200_000 {
            let scale = 1.0 + sigma * gaussian(&mut rng);
            let ti = wrap_round(i as f64 + di * scale, n1);
            let tj = wrap_round(j as f64 + dj * scale, n2);
            counts[ti * n2 + tj] += 1.0;
        }
        let tv = total_variation(&counts, mdp.transition(a).row(i * n2 + j).iter().copied());
        assert!(tv < 0.01, "action {a}: {tv}");
    }
}

#[test]
fn rewards_follow_the_angle() {
    let ring = ring_mdp(&RingSpec { n: 8, sigma: 0.0, gamma: 0.9 }).unwrap();
    for k in 0..8 {
        let expected = 1.0 + (2.0 * PI * k as f64 / 8.0).sin();
        assert!((ring.reward(k, 0) - expected).abs() < 1e-15);
        assert_eq!(ring.reward(k, 0), ring.reward(k, 1));
    }
    let torus = torus_mdp(&TorusSpec { n1: 4, n2: 6, sigma: 0.0, gamma: 0.9 }).unwrap();
    let (i, j) = (1, 2);
    let expected = 2.0 + (2.0 * PI * i as f64 / 4.0).sin() + (2.0 * PI * j as f64 / 6.0).cos();
    assert!((torus.reward(i * 6 + j, 2) - expected).abs() < 1e-15);
}

#[test]
fn displacement_wraps() {
    let ring = StateGeometry::Cyclic { n: 5 };
    assert_eq!(ring.displace(4, 0, 2), 1);
    assert_eq!(ring.displace(0, 3, 1), 3);
    let torus = StateGeometry::Torus { n1: 3, n2: 4 };
    // (2,3) + ((0,0) -> (1,1)) = (0,0)
    assert_eq!(torus.displace(2 * 4 + 3, 0, 4 + 1), 0);
}

#[test]
fn text_format_round_trips() {
    for mdp in [
        random_mdp(4, 3, 0.7, 9).unwrap(),
        ring_mdp(&RingSpec { n: 6, sigma: 0.4, gamma: 0.95 }).unwrap(),
    ] {
        assert_eq!(parse_mdp(&format_mdp(&mdp)).unwrap(), mdp);
    }
    let broken = format_mdp(&random_mdp(2, 2, 0.5, 1).unwrap()).replacen("0.", "7.", 1);
    assert!(parse_mdp(&broken).is_err());
}

#[test]
fn generators_are_pure() {
    assert_eq!(random_mdp(5, 2, 0.9, 42).unwrap(), random_mdp(5, 2, 0.9, 42).unwrap());
    assert_ne!(random_mdp(5, 2, 0.9, 42).unwrap(), random_mdp(5, 2, 0.9, 43).unwrap());
    let spec = TorusSpec { n1: 3, n2: 3, sigma: 0.5, gamma: 0.9 };
    assert_eq!(torus_mdp(&spec).unwrap(), torus_mdp(&spec).unwrap());
}
