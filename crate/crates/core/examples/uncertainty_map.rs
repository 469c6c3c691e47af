//! Per-component uncertainty of one sample on a 4×4 "image", written as PGM
//! maps for every step in the late window and for the window total.
//!
//! ```bash
//! cargo run --release --example uncertainty_map -- /tmp/maps
//! ```

use std::path::PathBuf;

use scoreuq::experiment::{prior_draws, BenchmarkSpec};
use scoreuq::io::write_image_map;
use scoreuq::sampler::{run_sampler_with_hooks, SamplerConfig, SamplerKind};
use scoreuq::schedule::{NoiseSchedule, TimestepPlan};
use scoreuq::score::GmmPredictor;
use scoreuq::uncertainty::{Perturbation, PerturbationScheme, UncertaintyRecorder};

fn main() -> scoreuq::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "uncertainty_maps".into()));
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = BenchmarkSpec::new(16).build()?;
    let predictor = GmmPredictor::new(dist, schedule.clone())?;
    let plan = TimestepPlan::uniform(1000, 50)?;
    let source = Perturbation {
        scheme: PerturbationScheme::Diffusion,
        samples: 5,
    };
    let mut recorder = UncertaintyRecorder::windowed(&source, &plan, [0.90, 0.96]);
    let cfg = SamplerConfig::new(SamplerKind::Ddim, plan, 3);
    let x = prior_draws(3, 1, 16).remove(0);
    let traj = run_sampler_with_hooks(&predictor, &schedule, &cfg, &x, &mut [&mut recorder])?;

    for (step, map) in &recorder.maps {
        let path = out.join(format!("step_{step:02}_t{:04}.pgm", map.t));
        write_image_map(&path, 4, 4, &map.values)?;
        println!("step {step} (t = {}): total {:.4} -> {}", map.t, map.total(), path.display());
    }
    let total = recorder.accumulated().expect("window is nonempty");
    write_image_map(&out.join("window_total.pgm"), 4, 4, &total)?;
    println!("sample-level score {:.4}, {} evaluations", total.iter().sum::<f64>(), traj.nfe);
    Ok(())
}
