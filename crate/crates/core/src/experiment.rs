//! Batched, parallel building blocks shared by the CLI, the examples and the
//! evaluation suite: benchmark distributions, sample pools with per-sample
//! RNG streams, uncertainty-scored pools and step-wise profiles.
//!
//! Sample `i` of a batch always uses stream `i` of the run seed, so results
//! are identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{guided_sample, GuidanceConfig, GuidanceHook, GuidedStep};
use crate::rng::{Purpose, RngStream};
use crate::sampler::{run_sampler, run_sampler_with_hooks, SamplerConfig, StepHook, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::score::{GmmDistribution, NoisePredictor};
use crate::uncertainty::{UncertaintyMap, UncertaintyRecorder, UncertaintySource};

/// Two-component, axis-aligned mixture used by the scaled experiments.
///
/// Component means are separated along every axis by a gap drawn uniformly
/// from `gap`, so some coordinates are well resolved and others ambiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_weights")]
    pub weights: [f64; 2],
    /// Per-component isotropic variance.
    #[serde(default = "default_variances")]
    pub variances: [f64; 2],
    #[serde(default = "default_gap")]
    pub gap: [f64; 2],
}

fn default_weights() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_variances() -> [f64; 2] {
    [0.04, 0.04]
}
fn default_gap() -> [f64; 2] {
    [0.5, 2.0]
}

impl BenchmarkSpec {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            seed: 0,
            weights: default_weights(),
            variances: default_variances(),
            gap: default_gap(),
        }
    }

    pub fn build(&self) -> Result<GmmDistribution> {
        if self.dim == 0 {
            return Err(Error::config("benchmark dimension must be positive"));
        }
        if !(self.gap[0] >= 0.0 && self.gap[1] >= self.gap[0]) {
            return Err(Error::config("benchmark gap range must satisfy 0 <= lo <= hi"));
        }
        let mut rng = RngStream::new(self.seed, 0);
        let mut a = Vec::with_capacity(self.dim);
        let mut b = Vec::with_capacity(self.dim);
        for _ in 0..self.dim {
            let gap = self.gap[0] + (self.gap[1] - self.gap[0]) * rng.uniform();
            let centre = 0.5 * (rng.uniform() - 0.5);
            a.push(centre - 0.5 * gap);
            b.push(centre + 0.5 * gap);
        }
        let dist = GmmDistribution {
            weights: self.weights.to_vec(),
            means: vec![a, b],
            variances: vec![vec![self.variances[0]; self.dim], vec![self.variances[1]; self.dim]],
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// The default benchmark in `dim` dimensions with layout seed `seed`.
pub fn benchmark_gmm(dim: usize, seed: u64) -> Result<GmmDistribution> {
    BenchmarkSpec {
        seed,
        ..BenchmarkSpec::new(dim)
    }
    .build()
}

/// One-dimensional two-mode mixture used for the score/curvature identity.
pub fn identity_gmm_1d() -> GmmDistribution {
    GmmDistribution {
        weights: vec![0.5, 0.5],
        means: vec![vec![-2.0], vec![2.0]],
        variances: vec![vec![0.25], vec![0.25]],
    }
}

/// Standard-normal starting points, sample `i` drawn from prior stream `i`.
pub fn prior_draws(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| Purpose::Prior.stream(seed, i as u64).gaussian_vec(dim))
        .collect()
}

/// Exact draws from `dist`, sample `i` from reference stream `i`.
pub fn reference_samples(dist: &GmmDistribution, seed: u64, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .into_par_iter()
        .map(|i| dist.sample(&mut Purpose::Reference.stream(seed, i as u64)))
        .collect()
}

/// Unguided sampling of every starting point.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    starts: &[Vec<f64>],
) -> Result<Vec<Trajectory>> {
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x)| run_sampler(predictor, schedule, &sampler.with_stream(i as u64), x))
        .collect()
}

/// Guided sampling of every starting point.
pub fn guided_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    starts: &[Vec<f64>],
) -> Result<Vec<(Trajectory, Vec<GuidedStep>)>> {
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x)| guided_sample(predictor, schedule, &sampler.with_stream(i as u64), guidance, x))
        .collect()
}

/// A generated sample with its recorded uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample: Vec<f64>,
    /// Sum of all components of all maps in the window.
    pub score: f64,
    /// Total of each recorded step's map, in recording order.
    pub step_totals: Vec<f64>,
    pub nfe: u64,
}

/// Sample every starting point while recording `source` on the given plan
/// steps, optionally with guidance applied before the recording.
pub fn scored_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    source: &dyn UncertaintySource,
    steps: &[usize],
    guidance: Option<&GuidanceConfig>,
    starts: &[Vec<f64>],
) -> Result<Vec<ScoredSample>> {
    Ok(recorded_batch(predictor, schedule, sampler, source, steps, guidance, starts)?
        .into_iter()
        .map(|(traj, maps)| {
            let step_totals: Vec<f64> = maps.iter().map(UncertaintyMap::total).collect();
            ScoredSample {
                sample: traj.final_sample,
                score: step_totals.iter().sum(),
                step_totals,
                nfe: traj.nfe,
            }
        })
        .collect())
}

/// Unguided per-step maps of every starting point on the given plan steps.
pub fn map_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    source: &dyn UncertaintySource,
    steps: &[usize],
    starts: &[Vec<f64>],
) -> Result<Vec<Vec<UncertaintyMap>>> {
    Ok(recorded_batch(predictor, schedule, sampler, source, steps, None, starts)?
        .into_iter()
        .map(|(_, maps)| maps)
        .collect())
}

fn recorded_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    source: &dyn UncertaintySource,
    steps: &[usize],
    guidance: Option<&GuidanceConfig>,
    starts: &[Vec<f64>],
) -> Result<Vec<(Trajectory, Vec<UncertaintyMap>)>> {
    if let Some(g) = guidance {
        g.validate()?;
    }
    if steps.is_empty() {
        return Err(Error::config("no steps selected for uncertainty"));
    }
    let sampler = SamplerConfig {
        record_states: false,
        ..sampler.clone()
    };
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rec = UncertaintyRecorder::on_steps(source, steps.to_vec());
            let mut guide = guidance.map(GuidanceHook::new);
            let mut hooks: Vec<&mut dyn StepHook> = Vec::with_capacity(2);
            if let Some(g) = guide.as_mut() {
                hooks.push(g);
            }
            hooks.push(&mut rec);
            let traj =
                run_sampler_with_hooks(predictor, schedule, &sampler.with_stream(i as u64), x, &mut hooks)?;
            Ok((traj, rec.maps.into_iter().map(|(_, m)| m).collect()))
        })
        .collect()
}

/// Per-sample, per-step uncertainty totals over the whole plan.
pub fn step_profile<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    source: &dyn UncertaintySource,
    starts: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let steps: Vec<usize> = (0..sampler.plan.len()).collect();
    Ok(scored_batch(predictor, schedule, sampler, source, &steps, None, starts)?
        .into_iter()
        .map(|s| s.step_totals)
        .collect())
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Two-sided exact sign test p-value for `wins` successes out of `n`
/// non-tied pairs.
pub fn sign_test_p_value(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(n - wins);
    let mut tail = 0.0;
    let mut c = 1.0f64;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

/// Median of a nonempty slice (mean of the two central values when even).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
