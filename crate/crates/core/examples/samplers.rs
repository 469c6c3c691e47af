//! DDPM and DDIM driven by the exact score of a two-mode mixture.
//!
//! ```bash
//! cargo run --release --example samplers
//! ```

use scoreuq::experiment::{identity_gmm_1d, prior_draws, reference_samples, sample_batch};
use scoreuq::metrics::energy_distance;
use scoreuq::sampler::{SamplerConfig, SamplerKind};
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::GmmPredictor;

fn main() -> scoreuq::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = identity_gmm_1d();
    let predictor = GmmPredictor::new(dist.clone(), schedule.clone())?;
    let reference = reference_samples(&dist, 1, 2000);
    let starts = prior_draws(0, 2000, 1);

    println!("sampler steps   mean     var   right-mode  energy-distance");
    for kind in [SamplerKind::Ddpm, SamplerKind::Ddim] {
        for steps in [10, 50, 250] {
            let cfg = SamplerConfig::new(kind, TimestepPlan::uniform(1000, steps)?, 0);
            let xs: Vec<Vec<f64>> = sample_batch(&predictor, &schedule, &cfg, &starts)?
                .into_iter()
                .map(|t| t.final_sample)
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().map(|x| x[0]).sum::<f64>() / n;
            let var = xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let right = xs.iter().filter(|x| x[0] > 0.0).count() as f64 / n;
            println!(
                "{:<7} {steps:>5} {mean:>7.3} {var:>7.3} {right:>10.3} {:>16.5}",
                format!("{kind:?}"),
                energy_distance(&xs, &reference)?
            );
        }
    }
    println!("target: mean 0, variance 4.25, half the mass in each mode");
    Ok(())
}
