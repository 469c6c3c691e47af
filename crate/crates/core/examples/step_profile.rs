//! Per-step total uncertainty across a batch of samples: mean and spread at
//! every generation step.
//!
//! ```bash
//! cargo run --release --example step_profile
//! ```

use scoreuq::experiment::{argmax, prior_draws, step_profile, BenchmarkSpec};
use scoreuq::sampler::{SamplerConfig, SamplerKind};
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::GmmPredictor;
use scoreuq::uncertainty::{uncertainty_profile, Perturbation, PerturbationScheme};

fn main() -> scoreuq::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = BenchmarkSpec::new(8).build()?;
    let predictor = GmmPredictor::new(dist, schedule.clone())?;
    let sampler = SamplerConfig::new(SamplerKind::Ddim, TimestepPlan::uniform(1000, 50)?, 0);
    let source = Perturbation {
        scheme: PerturbationScheme::Diffusion,
        samples: 5,
    };
    let totals = step_profile(&predictor, &schedule, &sampler, &source, &prior_draws(0, 200, 8))?;
    let (mean, std) = uncertainty_profile(&totals)?;
    println!("step     t      mean       std");
    for (i, t) in sampler.plan.steps().iter().enumerate().step_by(5) {
        println!("{i:>4} {t:>5} {:>9.3} {:>9.3}", mean[i], std[i]);
    }
    let peak = argmax(&std).expect("plan is nonempty");
    println!("largest spread at step {peak} of {}", std.len());
    Ok(())
}
