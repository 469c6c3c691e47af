//! Evaluation: the score/curvature identity, sparsification curves with
//! AUSE and AURG, the reconstruction protocol, energy distance, and
//! uncertainty-based pool filtering.
//!
//! Everything here is deterministic for a given seed and independent of the
//! rayon thread count: parallel work is split into fixed chunks with their
//! own RNG streams, and partial results are reduced in index order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::sampler::{renoise, run_sampler_with_hooks, SamplerConfig, SamplerKind, StepHook};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::score::{GmmDistribution, NoisePredictor};
use crate::uncertainty::{UncertaintyRecorder, UncertaintySource};

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_SHUFFLES: usize = 10;

const CHUNK: usize = 4096;

/// Pairwise (tree) summation with a fixed leaf size.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 64 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub t: usize,
    pub samples: usize,
    /// Per-axis mean of the squared score.
    pub lhs: Vec<f64>,
    /// Per-axis mean of the negated Hessian diagonal.
    pub rhs: Vec<f64>,
    pub se_lhs: Vec<f64>,
    pub se_rhs: Vec<f64>,
    /// Standard error of the paired per-sample difference.
    pub se_diff: Vec<f64>,
    pub max_z: f64,
}

impl IdentityReport {
    pub fn max_relative_gap(&self) -> f64 {
        self.lhs
            .iter()
            .zip(&self.rhs)
            .map(|(l, r)| (l - r).abs() / r.abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Default, Clone)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; d],
            sum_sq: vec![0.0; d],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        for ((s, q), x) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(v) {
            *s += x;
            *q += x * x;
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sum_sq[i] += other.sum_sq[i];
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    fn standard_error(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, ss)| {
                let var = ((ss - s * s / n) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect()
    }
}

/// Monte-Carlo check of `E[(∂_i log q_t)²] = −E[∂²_i log q_t]` under the
/// exact marginal `q_t`, per axis.
pub fn fisher_identity_check(
    dist: &GmmDistribution,
    schedule: &NoiseSchedule,
    t: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<IdentityReport> {
    if samples < 100 {
        return Err(Error::config("identity check needs at least 100 samples"));
    }
    dist.validate()?;
    let marginal = dist.marginal(schedule, t)?;
    let d = dist.dim();
    let root = rng.next_u64();
    let chunks = samples.div_ceil(CHUNK);
    let partials: Vec<[Moments; 3]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut stream = RngStream::new(root, c as u64);
            let mut acc = [Moments::new(d), Moments::new(d), Moments::new(d)];
            let n = CHUNK.min(samples - c * CHUNK);
            for _ in 0..n {
                let x = marginal.sample(&mut stream);
                let (g, h) = marginal.score_and_hessian_diag(&x);
                let lhs: Vec<f64> = g.iter().map(|v| v * v).collect();
                let rhs: Vec<f64> = h.iter().map(|v| -v).collect();
                let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
                acc[0].push(&lhs);
                acc[1].push(&rhs);
                acc[2].push(&diff);
            }
            acc
        })
        .collect();
    let mut total = [Moments::new(d), Moments::new(d), Moments::new(d)];
    for p in &partials {
        for k in 0..3 {
            total[k].merge(&p[k]);
        }
    }
    let lhs = total[0].mean();
    let rhs = total[1].mean();
    let se_diff = total[2].standard_error();
    let max_z = lhs
        .iter()
        .zip(&rhs)
        .zip(&se_diff)
        .map(|((l, r), se)| {
            let gap = (l - r).abs();
            if *se > 0.0 {
                gap / se
            } else if gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let report = IdentityReport {
        t,
        samples,
        se_lhs: total[0].standard_error(),
        se_rhs: total[1].standard_error(),
        se_diff,
        lhs,
        rhs,
        max_z,
    };
    if report.lhs.iter().chain(&report.rhs).any(|v| !v.is_finite()) {
        return Err(Error::numeric("identity check produced non-finite moments"));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationCurve {
    pub fractions: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Curve obtained by removing components in `order` (first removed first).
pub fn sparsification_curve_with_order(
    errors: &[f64],
    order: &[usize],
    bins: usize,
) -> Result<SparsificationCurve> {
    let n = errors.len();
    check_len(n, order.len())?;
    if bins == 0 || n < bins {
        return Err(Error::config(format!("need at least {bins} components, got {n}")));
    }
    // remaining[k] = sum of squared errors of order[k..]
    let mut remaining = vec![0.0; n + 1];
    for k in (0..n).rev() {
        remaining[k] = remaining[k + 1] + errors[order[k]].powi(2);
    }
    let mut fractions = Vec::with_capacity(bins);
    let mut values = Vec::with_capacity(bins);
    for b in 0..bins {
        let removed = (b * n).div_ceil(bins);
        fractions.push(b as f64 / bins as f64);
        values.push((remaining[removed] / (n - removed) as f64).sqrt());
    }
    Ok(SparsificationCurve {
        fractions,
        errors: values,
    })
}

/// Indices sorted by descending key, ties by ascending index.
fn descending_order(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

/// Drop the `⌈f·n⌉` most uncertain components at each fraction `f = b/B`
/// and report the RMSE of the rest.
pub fn sparsification_curve(
    errors: &[f64],
    uncertainty: &[f64],
    bins: usize,
) -> Result<SparsificationCurve> {
    check_len(errors.len(), uncertainty.len())?;
    sparsification_curve_with_order(errors, &descending_order(uncertainty), bins)
}

/// Best achievable curve: removal ordered by the true error.
pub fn oracle_curve(errors: &[f64], bins: usize) -> Result<SparsificationCurve> {
    sparsification_curve(errors, errors, bins)
}

/// Pointwise mean of `shuffles` curves with uniformly random removal order.
pub fn random_curve(
    errors: &[f64],
    bins: usize,
    shuffles: usize,
    rng: &mut RngStream,
) -> Result<SparsificationCurve> {
    if shuffles == 0 {
        return Err(Error::config("random baseline needs at least one shuffle"));
    }
    let mut mean: Option<SparsificationCurve> = None;
    for _ in 0..shuffles {
        let mut order: Vec<usize> = (0..errors.len()).collect();
        rng.shuffle(&mut order);
        let c = sparsification_curve_with_order(errors, &order, bins)?;
        match mean.as_mut() {
            None => mean = Some(c),
            Some(m) => m.errors.iter_mut().zip(&c.errors).for_each(|(a, b)| *a += b),
        }
    }
    let mut mean = mean.expect("at least one shuffle");
    for v in &mut mean.errors {
        *v /= shuffles as f64;
    }
    Ok(mean)
}

fn trapezoid(fractions: &[f64], values: &[f64]) -> f64 {
    fractions
        .windows(2)
        .zip(values.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// `(AUSE, AURG)`: area of `method − oracle` and of `random − method`, each
/// curve normalized by its value at fraction 0.
pub fn ause_aurg(
    method: &SparsificationCurve,
    oracle: &SparsificationCurve,
    random_mean: &SparsificationCurve,
) -> Result<(f64, f64)> {
    for c in [oracle, random_mean] {
        if c.fractions != method.fractions || c.errors.len() != method.errors.len() {
            return Err(Error::config("sparsification curves are not aligned"));
        }
    }
    let norm = |c: &SparsificationCurve| -> Option<Vec<f64>> {
        let first = *c.errors.first()?;
        (first != 0.0).then(|| c.errors.iter().map(|v| v / first).collect())
    };
    let (Some(m), Some(o), Some(r)) = (norm(method), norm(oracle), norm(random_mean)) else {
        return Ok((0.0, 0.0));
    };
    let f = &method.fractions;
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    Ok((trapezoid(f, &diff(&m, &o)), trapezoid(f, &diff(&r, &m))))
}

/// Sparsification summary of one uncertainty source on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationScores {
    pub ause: f64,
    pub aurg: f64,
    /// AUSE of the random-order baseline.
    pub ause_random: f64,
}

pub fn sparsification_scores(
    errors: &[f64],
    uncertainty: &[f64],
    bins: usize,
    shuffles: usize,
    rng: &mut RngStream,
) -> Result<SparsificationScores> {
    let method = sparsification_curve(errors, uncertainty, bins)?;
    let oracle = oracle_curve(errors, bins)?;
    let random = random_curve(errors, bins, shuffles, rng)?;
    let (ause, aurg) = ause_aurg(&method, &oracle, &random)?;
    let (ause_random, _) = ause_aurg(&random, &oracle, &random)?;
    Ok(SparsificationScores {
        ause,
        aurg,
        ause_random,
    })
}

#[derive(Debug, Clone)]
pub struct ReconstructionConfig {
    pub plan: TimestepPlan,
    /// Steps (fractions of the full plan) whose uncertainty is accumulated.
    pub window: [f64; 2],
    /// Noising level; `None` means `⌈T/2⌉`.
    pub start_t: Option<usize>,
    pub bins: usize,
    pub shuffles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReconstruction {
    pub reconstruction: Vec<f64>,
    pub abs_error: Vec<f64>,
    pub rmse: f64,
    /// Accumulated uncertainty per source.
    pub uncertainty: Vec<Vec<f64>>,
    pub scores: Vec<SparsificationScores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub images: Vec<ImageReconstruction>,
    /// Image-averaged scores per source.
    pub mean_scores: Vec<SparsificationScores>,
    pub mean_rmse: f64,
}

/// Noise each ground-truth point to `start_t`, denoise it with DDIM along
/// the plan entries at or below `start_t`, and score each uncertainty
/// source's accumulated window uncertainty against the per-component
/// reconstruction error.
pub fn reconstruction_eval<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    test_set: &[Vec<f64>],
    sources: &[&dyn UncertaintySource],
    config: &ReconstructionConfig,
) -> Result<ReconstructionReport> {
    if test_set.is_empty() {
        return Err(Error::config("reconstruction test set is empty"));
    }
    let start = config
        .start_t
        .unwrap_or_else(|| schedule.timesteps().div_ceil(2));
    let full = &config.plan;
    if start > 0 && full.steps()[0] < start {
        return Err(Error::config(format!(
            "plan starts at t = {}, below the noising level {start}",
            full.steps()[0]
        )));
    }
    let window_ts: Vec<usize> = full
        .window_indices(config.window[0], config.window[1])
        .into_iter()
        .map(|i| full.steps()[i])
        .collect();
    let restricted = if start == 0 {
        None
    } else {
        let mut steps: Vec<usize> = full.steps().iter().copied().filter(|&t| t < start).collect();
        steps.insert(0, start);
        Some(TimestepPlan::from_steps(steps, schedule.timesteps())?)
    };
    let record_at: Vec<usize> = restricted
        .as_ref()
        .map(|p| {
            (0..p.len())
                .filter(|&i| window_ts.contains(&p.steps()[i]))
                .collect()
        })
        .unwrap_or_default();

    let images = test_set
        .par_iter()
        .enumerate()
        .map(|(i, x0)| -> Result<ImageReconstruction> {
            check_len(predictor.dim(), x0.len())?;
            let d = x0.len();
            let (recon, uncertainty) = match &restricted {
                None => (x0.clone(), vec![vec![0.0; d]; sources.len()]),
                Some(plan) => {
                    let eps = Purpose::Prior.stream(config.seed, i as u64).gaussian_vec(d);
                    let x_start = renoise(x0, schedule, start, &eps)?;
                    let sampler = SamplerConfig {
                        record_states: false,
                        ..SamplerConfig::new(SamplerKind::Ddim, plan.clone(), config.seed)
                    }
                    .with_stream(i as u64);
                    let mut recorders: Vec<UncertaintyRecorder> = sources
                        .iter()
                        .map(|s| UncertaintyRecorder::on_steps(*s, record_at.clone()))
                        .collect();
                    let mut hooks: Vec<&mut dyn StepHook> =
                        recorders.iter_mut().map(|r| r as &mut dyn StepHook).collect();
                    let traj = run_sampler_with_hooks(predictor, schedule, &sampler, &x_start, &mut hooks)?;
                    let acc = recorders
                        .iter()
                        .map(|r| r.accumulated().unwrap_or_else(|| vec![0.0; d]))
                        .collect();
                    (traj.final_sample, acc)
                }
            };
            let abs_error: Vec<f64> = recon.iter().zip(x0).map(|(a, b)| (a - b).abs()).collect();
            let rmse = (abs_error.iter().map(|e| e * e).sum::<f64>() / d as f64).sqrt();
            let bins = config.bins.min(d);
            let scores = uncertainty
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    let mut rng = Purpose::Shuffle.stream(config.seed, (i * sources.len().max(1) + k) as u64);
                    sparsification_scores(&abs_error, u, bins, config.shuffles, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageReconstruction {
                reconstruction: recon,
                abs_error,
                rmse,
                uncertainty,
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = images.len() as f64;
    let mean_scores = (0..sources.len())
        .map(|k| {
            let avg = |f: fn(&SparsificationScores) -> f64| {
                pairwise_sum(&images.iter().map(|im| f(&im.scores[k])).collect::<Vec<_>>()) / n
            };
            SparsificationScores {
                ause: avg(|s| s.ause),
                aurg: avg(|s| s.aurg),
                ause_random: avg(|s| s.ause_random),
            }
        })
        .collect();
    let mean_rmse = pairwise_sum(&images.iter().map(|im| im.rmse).collect::<Vec<_>>()) / n;
    Ok(ReconstructionReport {
        images,
        mean_scores,
        mean_rmse,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| pairwise_sum(&b.iter().map(|y| euclidean(x, y)).collect::<Vec<_>>()))
        .collect();
    pairwise_sum(&rows) / (a.len() as f64 * b.len() as f64)
}

/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` over all ordered pairs (V-statistic).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("energy distance needs nonempty sample sets"));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_len(d, x.len())?;
    }
    Ok(2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b))
}

/// Keep the `⌊f·n⌋` lowest-uncertainty indices (ties by ascending index),
/// returned in ascending order.
pub fn filter_pool(uncertainties: &[f64], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let n = uncertainties.len();
    let keep = ((keep_fraction * n as f64) + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]).then(a.cmp(&b)));
    let mut kept = idx[..keep.min(n)].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
