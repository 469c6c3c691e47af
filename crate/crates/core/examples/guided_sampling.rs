//! Uncertainty-guided sampling next to plain sampling from the same starts,
//! with per-step masking counts and the evaluation overhead.
//!
//! ```bash
//! cargo run --release --example guided_sampling
//! ```

use scoreuq::experiment::{guided_batch, prior_draws, reference_samples, sample_batch, BenchmarkSpec};
use scoreuq::guidance::GuidanceConfig;
use scoreuq::metrics::energy_distance;
use scoreuq::sampler::{SamplerConfig, SamplerKind};
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::GmmPredictor;

fn main() -> scoreuq::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = BenchmarkSpec::new(8).build()?;
    let predictor = GmmPredictor::new(dist.clone(), schedule.clone())?;
    let sampler = SamplerConfig {
        record_states: false,
        ..SamplerConfig::new(SamplerKind::Ddim, TimestepPlan::uniform(1000, 50)?, 0)
    };
    let starts = prior_draws(0, 300, 8);
    let reference = reference_samples(&dist, 1, 2000);

    let plain: Vec<Vec<f64>> = sample_batch(&predictor, &schedule, &sampler, &starts)?
        .into_iter()
        .map(|t| t.final_sample)
        .collect();
    println!("unguided: energy distance {:.5}", energy_distance(&plain, &reference)?);

    for strength in [0.5, 1.0, 2.0] {
        let guidance = GuidanceConfig {
            strength,
            ..GuidanceConfig::default()
        };
        let runs = guided_batch(&predictor, &schedule, &sampler, &guidance, &starts)?;
        let masked: usize = runs.iter().flat_map(|(_, log)| log.iter().map(|g| g.masked)).sum();
        let nfe = runs.iter().map(|(t, _)| t.nfe).sum::<u64>() as f64 / runs.len() as f64;
        let samples: Vec<Vec<f64>> = runs.into_iter().map(|(t, _)| t.final_sample).collect();
        println!(
            "λ = {strength}: energy distance {:.5}, {masked} masked components, {nfe:.1} evaluations per sample",
            energy_distance(&samples, &reference)?
        );
    }
    Ok(())
}
