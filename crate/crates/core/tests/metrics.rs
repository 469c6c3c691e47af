//! Sparsification, energy distance, filtering and the identity check.

use proptest::prelude::*;
use scoreuq::metrics::{
    ause_aurg, energy_distance, filter_pool, fisher_identity_check, oracle_curve, random_curve,
    reconstruction_eval, sparsification_curve, ReconstructionConfig,
};
use scoreuq::rng::RngStream;
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::{DatasetPredictor, GmmDistribution};
use scoreuq::uncertainty::{Perturbation, PerturbationScheme, UncertaintySource};

/// Brute-force V-statistic with naive summation.
fn energy_brute(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mean = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += d(x, y);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

fn points(rng: &mut RngStream, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.gaussian_vec(d).into_iter().map(|v| v + shift).collect()).collect()
}

#[test]
fn energy_distance_matches_brute_force() {
    let mut rng = RngStream::new(5, 0);
    let a = points(&mut rng, 37, 3, 0.0);
    let b = points(&mut rng, 53, 3, 0.4);
    let fast = energy_distance(&a, &b).unwrap();
    let slow = energy_brute(&a, &b);
    assert!((fast - slow).abs() < 1e-12 * slow.abs().max(1.0), "{fast} vs {slow}");
    let ab = energy_distance(&a, &b).unwrap();
    let ba = energy_distance(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-14);
    assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn identity_holds_for_standard_normal() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let dist = GmmDistribution::standard_normal(2);
    let mut rng = RngStream::new(12, 0);
    for &t in &[1, 500, 1000] {
        let r = fisher_identity_check(&dist, &sched, t, 100_000, &mut rng).unwrap();
        for i in 0..2 {
            assert!((r.lhs[i] - 1.0).abs() < 0.02, "t={t}: lhs {}", r.lhs[i]);
            assert!((r.rhs[i] - 1.0).abs() < 1e-12, "t={t}: rhs {}", r.rhs[i]);
        }
        assert!(r.max_relative_gap() < 0.02);
    }
}

#[test]
fn identity_for_point_mass_is_inverse_variance() {
    // Marginal of a point mass is N(√ᾱ·x0, σ²); choose β so σ² = 0.28.
    let sched = NoiseSchedule::from_betas(vec![0.28]).unwrap();
    let dist = GmmDistribution::point_mass(vec![0.7]);
    let r = fisher_identity_check(&dist, &sched, 1, 100_000, &mut RngStream::new(1, 0)).unwrap();
    assert!((r.rhs[0] - 1.0 / 0.28).abs() < 1e-12);
    assert!((r.lhs[0] / r.rhs[0] - 1.0).abs() < 0.02);
}

#[test]
fn reconstruction_without_noise_is_exact() {
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let data = vec![vec![0.2, -0.4, 1.0], vec![-0.3, 0.3, 0.1]];
    let pred = DatasetPredictor::new(data.clone(), sched.clone()).unwrap();
    let source = Perturbation {
        scheme: PerturbationScheme::Diffusion,
        samples: 3,
    };
    let sources: [&dyn UncertaintySource; 1] = [&source];
    let cfg = ReconstructionConfig {
        plan: TimestepPlan::uniform(100, 10).unwrap(),
        window: [0.0, 1.0],
        start_t: Some(0),
        bins: 3,
        shuffles: 2,
        seed: 0,
    };
    let report = reconstruction_eval(&pred, &sched, &data, &sources, &cfg).unwrap();
    assert_eq!(report.mean_rmse, 0.0);
}

#[test]
fn single_point_reconstruction_returns_the_point() {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let point = vec![0.5, -1.5];
    let pred = DatasetPredictor::new(vec![point.clone()], sched.clone()).unwrap();
    let source = Perturbation {
        scheme: PerturbationScheme::Diffusion,
        samples: 2,
    };
    let sources: [&dyn UncertaintySource; 1] = [&source];
    let cfg = ReconstructionConfig {
        plan: TimestepPlan::uniform(1000, 50).unwrap(),
        window: [0.9, 0.96],
        start_t: None,
        bins: 2,
        shuffles: 1,
        seed: 3,
    };
    let report = reconstruction_eval(&pred, &sched, &[point], &sources, &cfg).unwrap();
    assert!(report.mean_rmse < 1e-6, "{}", report.mean_rmse);
}

#[test]
fn filtering_helps_when_uncertainty_tracks_error() {
    // Synthetic pool: per-sample error e_i, uncertainty = e_i + noise.
    let mut rng = RngStream::new(21, 0);
    let errors: Vec<f64> = (0..2000).map(|_| rng.gaussian().abs()).collect();
    let unc: Vec<f64> = errors.iter().map(|e| e + 0.3 * rng.gaussian()).collect();
    let kept = filter_pool(&unc, 0.5).unwrap();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    rng.shuffle(&mut order);
    let mean = |idx: &[usize]| idx.iter().map(|&i| errors[i]).sum::<f64>() / idx.len() as f64;
    assert_eq!(kept.len(), 1000);
    assert!(mean(&kept) < mean(&order[..1000]));
}

proptest! {
    #[test]
    fn oracle_lower_bounds_every_ordering(
        pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 2..60),
        bins in 1usize..20,
    ) {
        let errors: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let unc: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let bins = bins.min(errors.len());
        let method = sparsification_curve(&errors, &unc, bins).unwrap();
        let oracle = oracle_curve(&errors, bins).unwrap();
        for (m, o) in method.errors.iter().zip(&oracle.errors) {
            prop_assert!(*o <= m + 1e-12);
        }
        let random = random_curve(&errors, bins, 3, &mut RngStream::new(0, 0)).unwrap();
        let (ause, _) = ause_aurg(&method, &oracle, &random).unwrap();
        prop_assert!(ause >= -1e-12);
    }

    #[test]
    fn energy_distance_symmetric_and_nonnegative(seed in 0u64..1000, n in 1usize..20, m in 1usize..20) {
        let mut rng = RngStream::new(seed, 0);
        let a = points(&mut rng, n, 2, 0.0);
        let b = points(&mut rng, m, 2, 0.5);
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= -1e-12);
    }

    #[test]
    fn filter_keeps_the_lowest(values in prop::collection::vec(-10.0f64..10.0, 1..80), frac in 0.01f64..1.0) {
        let kept = filter_pool(&values, frac).unwrap();
        prop_assert_eq!(kept.len(), (frac * values.len() as f64 + 1e-9).floor() as usize);
        let worst_kept = kept.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in values.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(*v >= worst_kept);
            }
        }
    }
}
