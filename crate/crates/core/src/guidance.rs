//! Uncertainty-guided sampling.
//!
//! At each guided step the base prediction `ε̂` is updated on its most
//! uncertain components by gradient ascent on the uncertainty:
//! `ε̂ ← ε̂ + λ · mask ⊙ ∂U/∂ε̂`. The derivative is taken componentwise (the
//! Jacobian diagonal) by finite differences through the whole estimator
//! pipeline, holding the estimator's re-noising draws fixed so that `U` is a
//! smooth deterministic function of `ε̂`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::RngStream;
use crate::sampler::{run_sampler_with_hooks, SamplerConfig, StepContext, StepHook, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::score::NoisePredictor;
use crate::uncertainty::{estimate_with_base, uncertainty_from_draws, validate_window, UncertaintyMap};

pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const DEFAULT_STRENGTH: f64 = 1.0;
pub const DEFAULT_H_REL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    /// Threshold is the `p`-th percentile of the current map.
    PerStepPercentile,
    /// Fixed threshold per plan step, e.g. from [`calibrate_thresholds`].
    Calibrated { thresholds: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GradEstimator {
    /// Central differences, one component at a time: `2M` evaluations per
    /// masked component.
    CentralFd { h_rel: f64 },
    /// Simultaneous ±1 perturbations of all masked components: `2M`
    /// evaluations per direction.
    Spsa { directions: usize, h_rel: f64 },
}

impl Default for GradEstimator {
    fn default() -> Self {
        GradEstimator::CentralFd { h_rel: DEFAULT_H_REL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default = "default_threshold")]
    pub threshold: ThresholdMode,
    #[serde(default)]
    pub gradient: GradEstimator,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Fraction of generation progress on which guidance is applied.
    #[serde(default = "default_guided_window")]
    pub window: [f64; 2],
}

fn default_percentile() -> f64 {
    DEFAULT_PERCENTILE
}
fn default_strength() -> f64 {
    DEFAULT_STRENGTH
}
fn default_threshold() -> ThresholdMode {
    ThresholdMode::PerStepPercentile
}
fn default_samples() -> usize {
    crate::uncertainty::DEFAULT_SAMPLES
}
fn default_guided_window() -> [f64; 2] {
    [0.0, 1.0]
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            percentile: DEFAULT_PERCENTILE,
            strength: DEFAULT_STRENGTH,
            threshold: ThresholdMode::PerStepPercentile,
            gradient: GradEstimator::default(),
            samples: default_samples(),
            window: default_guided_window(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.percentile) {
            return Err(Error::config(format!("percentile {} outside [0, 100]", self.percentile)));
        }
        if !self.strength.is_finite() {
            return Err(Error::config("guidance strength must be finite"));
        }
        if self.samples < 2 {
            return Err(Error::config("guidance needs M >= 2 samples"));
        }
        validate_window(self.window)?;
        match self.gradient {
            GradEstimator::CentralFd { h_rel } | GradEstimator::Spsa { h_rel, .. } if !(h_rel > 0.0) => {
                Err(Error::config("finite-difference step h_rel must be positive"))
            }
            GradEstimator::Spsa { directions: 0, .. } => Err(Error::config("SPSA needs at least one direction")),
            _ => Ok(()),
        }
    }
}

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 · (n − 1)`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Components strictly above `threshold`.
pub fn mask_above(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|v| *v > threshold).collect()
}

/// Components strictly above the `p`-th percentile of the map; ties with the
/// threshold are excluded.
pub fn percentile_mask(map: &UncertaintyMap, p: f64) -> Vec<bool> {
    mask_above(&map.values, percentile(&map.values, p))
}

fn fd_step(h_rel: f64, eps_i: f64) -> f64 {
    h_rel * (1.0 + eps_i.abs())
}

/// Diagonal `∂U_i/∂ε̂_i` for masked components by central differences through
/// the full estimator pipeline with frozen draws. Unmasked entries are 0.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_grad_diag(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
    mask: &[bool],
    draws: &[Vec<f64>],
    h_rel: f64,
) -> Result<Vec<f64>> {
    check_len(eps.len(), mask.len())?;
    check_len(x_t.len(), eps.len())?;
    let mut grad = vec![0.0; eps.len()];
    let mut shifted = eps.to_vec();
    for i in (0..eps.len()).filter(|&i| mask[i]) {
        let h = fd_step(h_rel, eps[i]);
        let up = eps[i] + h;
        let down = eps[i] - h;
        shifted[i] = up;
        let (u_up, _) = uncertainty_from_draws(predictor, schedule, x_t, t, &shifted, draws)?;
        shifted[i] = down;
        let (u_down, _) = uncertainty_from_draws(predictor, schedule, x_t, t, &shifted, draws)?;
        shifted[i] = eps[i];
        grad[i] = (u_up.values[i] - u_down.values[i]) / (up - down);
    }
    Ok(grad)
}

/// Simultaneous-perturbation estimate of the same diagonal.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_grad_spsa(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
    mask: &[bool],
    draws: &[Vec<f64>],
    h_rel: f64,
    directions: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    check_len(eps.len(), mask.len())?;
    let mut grad = vec![0.0; eps.len()];
    if !mask.iter().any(|m| *m) {
        return Ok(grad);
    }
    for _ in 0..directions {
        let delta: Vec<f64> = mask
            .iter()
            .map(|&m| {
                let sign = if rng.next_u64() >> 63 == 0 { 1.0 } else { -1.0 };
                if m {
                    sign
                } else {
                    0.0
                }
            })
            .collect();
        let step: Vec<f64> = eps.iter().zip(&delta).map(|(e, d)| fd_step(h_rel, *e) * d).collect();
        let up: Vec<f64> = eps.iter().zip(&step).map(|(e, s)| e + s).collect();
        let down: Vec<f64> = eps.iter().zip(&step).map(|(e, s)| e - s).collect();
        let (u_up, _) = uncertainty_from_draws(predictor, schedule, x_t, t, &up, draws)?;
        let (u_down, _) = uncertainty_from_draws(predictor, schedule, x_t, t, &down, draws)?;
        for i in (0..eps.len()).filter(|&i| mask[i]) {
            grad[i] += (u_up.values[i] - u_down.values[i]) / (up[i] - down[i]);
        }
    }
    for g in &mut grad {
        *g /= directions as f64;
    }
    Ok(grad)
}

/// `ε̂ + λ · (mask ⊙ grad)`.
pub fn apply_guidance(eps: &[f64], mask: &[bool], grad: &[f64], strength: f64) -> Result<Vec<f64>> {
    check_len(eps.len(), mask.len())?;
    check_len(eps.len(), grad.len())?;
    Ok(eps
        .iter()
        .zip(mask.iter().zip(grad))
        .map(|(e, (m, g))| if *m { e + strength * g } else { *e })
        .collect())
}

/// Per-step record of what guidance did.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep {
    pub step: usize,
    pub map: UncertaintyMap,
    pub masked: usize,
}

/// Sampler hook implementing the guided update.
pub struct GuidanceHook<'a> {
    config: &'a GuidanceConfig,
    pub log: Vec<GuidedStep>,
}

impl<'a> GuidanceHook<'a> {
    pub fn new(config: &'a GuidanceConfig) -> Self {
        Self {
            config,
            log: Vec::new(),
        }
    }

    fn threshold(&self, step: usize, map: &UncertaintyMap) -> Result<f64> {
        match &self.config.threshold {
            ThresholdMode::PerStepPercentile => Ok(percentile(&map.values, self.config.percentile)),
            ThresholdMode::Calibrated { thresholds } => thresholds
                .get(step)
                .copied()
                .ok_or_else(|| Error::config(format!("no calibrated threshold for step {step}"))),
        }
    }
}

impl StepHook for GuidanceHook<'_> {
    fn on_step(&mut self, ctx: &mut StepContext<'_>, predictor: &dyn NoisePredictor) -> Result<()> {
        let [lo, hi] = self.config.window;
        let progress = ctx.progress();
        if progress < lo - 1e-9 || progress > hi + 1e-9 {
            return Ok(());
        }
        let est = estimate_with_base(
            predictor,
            ctx.schedule,
            ctx.x_t,
            ctx.t,
            ctx.eps,
            self.config.samples,
            ctx.rng,
        )?;
        let mask = mask_above(&est.map.values, self.threshold(ctx.step, &est.map)?);
        let masked = mask.iter().filter(|m| **m).count();
        if masked > 0 && self.config.strength != 0.0 {
            let grad = match self.config.gradient {
                GradEstimator::CentralFd { h_rel } => uncertainty_grad_diag(
                    predictor, ctx.schedule, ctx.x_t, ctx.t, ctx.eps, &mask, &est.draws, h_rel,
                )?,
                GradEstimator::Spsa { directions, h_rel } => uncertainty_grad_spsa(
                    predictor, ctx.schedule, ctx.x_t, ctx.t, ctx.eps, &mask, &est.draws, h_rel,
                    directions, ctx.rng,
                )?,
            };
            *ctx.eps = apply_guidance(ctx.eps, &mask, &grad, self.config.strength)?;
        }
        self.log.push(GuidedStep {
            step: ctx.step,
            map: est.map,
            masked,
        });
        Ok(())
    }
}

/// Guided sampling loop. Returns the trajectory and the per-step log.
pub fn guided_sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    x_start: &[f64],
) -> Result<(Trajectory, Vec<GuidedStep>)> {
    guidance.validate()?;
    if let ThresholdMode::Calibrated { thresholds } = &guidance.threshold {
        check_len(sampler.plan.len(), thresholds.len())?;
    }
    let mut hook = GuidanceHook::new(guidance);
    let traj = run_sampler_with_hooks(predictor, schedule, sampler, x_start, &mut [&mut hook])?;
    Ok((traj, hook.log))
}

/// Per-step thresholds: the `p`-th percentile of all component values of
/// all maps recorded at that step across a pool of runs.
/// `pool[sample][step]` holds one map per plan step.
pub fn calibrate_thresholds(pool: &[Vec<UncertaintyMap>], p: f64) -> Result<Vec<f64>> {
    let steps = pool
        .first()
        .ok_or_else(|| Error::config("calibration pool is empty"))?
        .len();
    (0..steps)
        .map(|s| {
            let mut values = Vec::new();
            for run in pool {
                let map = run
                    .get(s)
                    .ok_or_else(|| Error::config("calibration runs disagree on step count"))?;
                values.extend_from_slice(&map.values);
            }
            Ok(percentile(&values, p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::FnPredictor;

    fn map(values: Vec<f64>) -> UncertaintyMap {
        UncertaintyMap { t: 1, values }
    }

    #[test]
    fn percentile_mask_cases() {
        let u = map(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(percentile(&u.values, 50.0), 2.5);
        assert_eq!(percentile_mask(&u, 50.0), vec![false, false, true, true]);
        assert_eq!(percentile_mask(&u, 100.0), vec![false; 4]);
        let flat = map(vec![0.3; 5]);
        for p in [0.0, 10.0, 95.0, 100.0] {
            assert_eq!(percentile_mask(&flat, p), vec![false; 5]);
        }
    }

    #[test]
    fn apply_guidance_cases() {
        let e = [0.5, -1.0, 2.0];
        let g = [3.0, 4.0, 5.0];
        assert_eq!(apply_guidance(&e, &[true; 3], &g, 0.0).unwrap(), e.to_vec());
        assert_eq!(apply_guidance(&e, &[false; 3], &g, 7.0).unwrap(), e.to_vec());
        assert_eq!(apply_guidance(&[1.0], &[true], &[-2.0], 1.0).unwrap(), vec![-1.0]);
        assert!(apply_guidance(&e, &[true; 2], &g, 1.0).is_err());
    }

    #[test]
    fn gradient_vanishes_for_linear_predictor() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let p = FnPredictor::new(2, |x: &[f64], t| x.iter().map(|v| v / s.sigma(t)).collect());
        let mut rng = RngStream::new(1, 0);
        let x = [0.3, -0.8];
        let eps = p.predict(&x, 40).unwrap();
        let est = estimate_with_base(&p, &s, &x, 40, &eps, 5, &mut rng).unwrap();
        let g = uncertainty_grad_diag(&p, &s, &x, 40, &eps, &[true, true], &est.draws, 1e-4).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn empty_mask_gives_zero_gradient() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let p = FnPredictor::new(1, |x: &[f64], _| vec![x[0] * x[0]]);
        let draws = vec![vec![1.0], vec![-1.0]];
        let g = uncertainty_grad_diag(&p, &s, &[1.0], 5, &[0.0], &[false], &draws, 1e-4).unwrap();
        assert_eq!(g, vec![0.0]);
        let mut rng = RngStream::new(0, 0);
        let g = uncertainty_grad_spsa(&p, &s, &[1.0], 5, &[0.0], &[false], &draws, 1e-4, 3, &mut rng)
            .unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        let bad = GuidanceConfig {
            percentile: 101.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuidanceConfig {
            gradient: GradEstimator::CentralFd { h_rel: 0.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn calibration_takes_pooled_percentile() {
        let pool = vec![
            vec![map(vec![1.0, 2.0]), map(vec![10.0, 20.0])],
            vec![map(vec![3.0, 4.0]), map(vec![30.0, 40.0])],
        ];
        let th = calibrate_thresholds(&pool, 50.0).unwrap();
        assert_eq!(th, vec![2.5, 25.0]);
    }
}
