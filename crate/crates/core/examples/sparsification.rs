//! Reconstruction protocol: noise test points halfway, denoise with DDIM,
//! and score how well each uncertainty ordering ranks the per-component
//! errors (AUSE, lower is better; AURG, higher is better).
//!
//! ```bash
//! cargo run --release --example sparsification
//! ```

use scoreuq::experiment::{reference_samples, BenchmarkSpec};
use scoreuq::metrics::{reconstruction_eval, ReconstructionConfig};
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::GmmPredictor;
use scoreuq::uncertainty::{Perturbation, PerturbationScheme, UncertaintySource};

fn main() -> scoreuq::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = BenchmarkSpec::new(16).build()?;
    let predictor = GmmPredictor::new(dist.clone(), schedule.clone())?;
    let test = reference_samples(&dist, 5, 50);

    let ours = Perturbation {
        scheme: PerturbationScheme::Diffusion,
        samples: 5,
    };
    let gaussian = Perturbation {
        scheme: PerturbationScheme::Gaussian { sigma: 0.1 },
        samples: 5,
    };
    let sources: [&dyn UncertaintySource; 2] = [&ours, &gaussian];
    let config = ReconstructionConfig {
        plan: TimestepPlan::uniform(1000, 50)?,
        window: [0.90, 0.96],
        start_t: None,
        bins: 100,
        shuffles: 10,
        seed: 0,
    };
    let report = reconstruction_eval(&predictor, &schedule, &test, &sources, &config)?;
    println!("mean reconstruction RMSE {:.4} over {} points", report.mean_rmse, test.len());
    for (name, s) in ["diffusion re-noising", "input perturbation"].iter().zip(&report.mean_scores) {
        println!(
            "{name:<21} AUSE {:.4} (random {:.4})  AURG {:+.4}",
            s.ause, s.ause_random, s.aurg
        );
    }
    Ok(())
}
