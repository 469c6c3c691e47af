//! Train the noise-prediction MLP on mixture samples, save it, load it back
//! and compare its predictions with the exact predictor on noised held-out
//! points.
//!
//! ```bash
//! cargo run --release --example train_mlp -- /tmp/model
//! ```

use std::path::PathBuf;

use scoreuq::experiment::{reference_samples, BenchmarkSpec};
use scoreuq::io::{load_mlp, save_mlp};
use scoreuq::mlp::{train_dsm, MlpConfig};
use scoreuq::rng::RngStream;
use scoreuq::schedule::NoiseSchedule;
use scoreuq::score::{GmmPredictor, NoisePredictor};

fn main() -> scoreuq::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "model".into()));
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let dist = BenchmarkSpec::new(2).build()?;
    let data = reference_samples(&dist, 0, 4000);
    let config = MlpConfig {
        hidden: vec![32, 32],
        epochs: 40,
        ..MlpConfig::new(2)
    };
    let (mlp, curve) = train_dsm(&data, &schedule, &config)?;
    for (epoch, loss) in curve.iter().enumerate().step_by(10) {
        println!("epoch {epoch:>3}: loss {loss:.4}");
    }
    println!("final loss {:.4}", curve.last().unwrap());

    save_mlp(&dir, &mlp)?;
    let loaded = load_mlp(&dir)?;
    assert_eq!(loaded, mlp);
    println!("saved and reloaded {}", dir.display());

    let exact = GmmPredictor::new(dist.clone(), schedule.clone())?;
    let held_out = reference_samples(&dist, 9, 200);
    let mut rng = RngStream::new(9, 0);
    for t in [50, 300, 800] {
        let (scale, sigma) = (schedule.alpha_bar(t).sqrt(), schedule.sigma(t));
        let mut err = 0.0;
        for x0 in &held_out {
            let x: Vec<f64> = x0.iter().map(|v| scale * v + sigma * rng.gaussian()).collect();
            let a = loaded.predict(&x, t)?;
            let b = exact.predict(&x, t)?;
            err += a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        }
        println!("t = {t:>3}: mean squared gap to exact predictor {:.4}", err / 200.0);
    }
    Ok(())
}
