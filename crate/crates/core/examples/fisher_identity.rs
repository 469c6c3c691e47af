//! Monte-Carlo check that the mean squared score equals the negative mean
//! curvature of the log-density, across noise levels.
//!
//! ```bash
//! cargo run --release --example fisher_identity
//! ```

use scoreuq::experiment::identity_gmm_1d;
use scoreuq::metrics::fisher_identity_check;
use scoreuq::rng::RngStream;
use scoreuq::schedule::NoiseSchedule;
use scoreuq::score::GmmDistribution;

fn main() -> scoreuq::Result<()> {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut rng = RngStream::new(0, 0);
    let cases = [
        ("standard normal", GmmDistribution::standard_normal(1)),
        ("two-mode mixture", identity_gmm_1d()),
    ];
    println!("{:<17} {:>5} {:>10} {:>10} {:>9} {:>6}", "data", "t", "E[s²]", "-E[h]", "se(diff)", "z");
    for (name, dist) in &cases {
        for t in [1, 10, 100, 500, 1000] {
            let r = fisher_identity_check(dist, &schedule, t, 200_000, &mut rng)?;
            println!(
                "{name:<17} {t:>5} {:>10.4} {:>10.4} {:>9.4} {:>6.2}",
                r.lhs[0], r.rhs[0], r.se_diff[0], r.max_z
            );
        }
    }
    Ok(())
}
