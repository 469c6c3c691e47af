//! Score a pool of samples by their late-window uncertainty and compare the
//! low-uncertainty subset against a random subset of the same size.
//!
//! ```bash
//! cargo run --release --example filter_pool
//! ```

use scoreuq::experiment::{prior_draws, reference_samples, scored_batch, BenchmarkSpec};
use scoreuq::metrics::{energy_distance, filter_pool};
use scoreuq::rng::Purpose;
use scoreuq::sampler::{SamplerConfig, SamplerKind};
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::GmmPredictor;
use scoreuq::uncertainty::{Perturbation, PerturbationScheme};

fn main() -> scoreuq::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = BenchmarkSpec::new(8).build()?;
    let predictor = GmmPredictor::new(dist.clone(), schedule.clone())?;
    let sampler = SamplerConfig::new(SamplerKind::Ddim, TimestepPlan::uniform(1000, 50)?, 0);
    let steps = sampler.plan.window_indices(0.90, 0.96);
    let source = Perturbation {
        scheme: PerturbationScheme::Diffusion,
        samples: 5,
    };
    let pool = scored_batch(&predictor, &schedule, &sampler, &source, &steps, None, &prior_draws(0, 1200, 8))?;
    let scores: Vec<f64> = pool.iter().map(|s| s.score).collect();
    let kept = filter_pool(&scores, 1000.0 / 1200.0)?;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    Purpose::Shuffle.stream(0, 0).shuffle(&mut order);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].sample.clone()).collect::<Vec<_>>();
    let all: Vec<usize> = (0..pool.len()).collect();
    let reference = reference_samples(&dist, 1, 2000);
    println!("pool of {}, {} evaluations per sample", pool.len(), pool[0].nfe);
    for (name, idx) in [("all", &all[..]), ("lowest uncertainty", &kept[..]), ("random", &order[..kept.len()])] {
        println!("{name:<19} n={:<5} energy distance {:.5}", idx.len(), energy_distance(&pick(idx), &reference)?);
    }
    Ok(())
}
