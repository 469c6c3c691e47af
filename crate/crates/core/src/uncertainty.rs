//! Per-component uncertainty of the denoising step.
//!
//! The diffusion perturbation scheme denoises `x_t` to `x̂_0` with the base
//! prediction, re-noises it `M` times back to `t`, and takes the unbiased
//! per-component variance of the predictor over those `M` states. The base
//! prediction is shared with the sampler step, so the estimator adds exactly
//! `M` evaluations per step.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mlp::{mc_dropout_uncertainty, Mlp};
use crate::rng::RngStream;
use crate::sampler::{predict_x0, renoise, StepContext, StepHook};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::score::NoisePredictor;

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_WINDOW: [f64; 2] = [0.90, 0.96];

/// Per-component variance of predicted noise at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub t: usize,
    pub values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// The `M` predictions over perturbed states.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    scores: Vec<Vec<f64>>,
}

impl ScoreStack {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(Error::config("score stack needs M >= 2"));
        }
        let d = scores[0].len();
        for s in &scores {
            check_len(d, s.len())?;
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn variance(&self) -> Vec<f64> {
        mean_and_variance(&self.scores).1
    }
}

/// Componentwise mean and unbiased variance of at least two equal-length
/// rows. Deviations are taken relative to the first row, so identical rows
/// give exactly zero variance.
pub fn mean_and_variance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..d {
        let origin = rows[0][i];
        let shift = rows.iter().map(|r| r[i] - origin).sum::<f64>() / m as f64;
        let ss: f64 = rows.iter().map(|r| (r[i] - origin - shift).powi(2)).sum();
        mean[i] = origin + shift;
        var[i] = if m > 1 { ss / (m - 1) as f64 } else { 0.0 };
    }
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationScheme {
    /// Denoise to `x̂_0`, then re-noise back to `t`.
    Diffusion,
    /// Add `σ_p`-scaled Gaussian noise to `x_t` directly.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Fractional interval of generation progress `i / S`.
    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default = "default_scheme")]
    pub scheme: PerturbationScheme,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_window() -> [f64; 2] {
    DEFAULT_WINDOW
}
fn default_scheme() -> PerturbationScheme {
    PerturbationScheme::Diffusion
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            window: DEFAULT_WINDOW,
            scheme: PerturbationScheme::Diffusion,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::config("uncertainty needs M >= 2 samples"));
        }
        validate_window(self.window)?;
        if let PerturbationScheme::Gaussian { sigma } = self.scheme {
            if !(sigma > 0.0) {
                return Err(Error::config("Gaussian perturbation needs sigma > 0"));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_window(w: [f64; 2]) -> Result<()> {
    if !(0.0 <= w[0] && w[0] < w[1] && w[1] <= 1.0) {
        return Err(Error::config(format!(
            "window must satisfy 0 <= a < b <= 1, got [{}, {}]",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Result of one estimator call; `draws` are the re-noising tensors, kept so
/// that guidance can reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEstimate {
    pub map: UncertaintyMap,
    pub draws: Vec<Vec<f64>>,
    pub scores: ScoreStack,
}

/// Variance of the predictor over `x̂_t^i = renoise(x̂_0(x_t, eps), t, draws_i)`.
/// Costs `draws.len()` evaluations.
pub fn uncertainty_from_draws(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
    draws: &[Vec<f64>],
) -> Result<(UncertaintyMap, ScoreStack)> {
    if draws.len() < 2 {
        return Err(Error::config("uncertainty needs M >= 2 draws"));
    }
    schedule.check_t(t)?;
    let x0 = predict_x0(x_t, eps, schedule.alpha_bar(t))?;
    let scores = draws
        .iter()
        .map(|e| predictor.predict(&renoise(&x0, schedule, t, e)?, t))
        .collect::<Result<Vec<_>>>()?;
    let stack = ScoreStack::new(scores)?;
    let values = stack.variance();
    Ok((UncertaintyMap { t, values }, stack))
}

/// Estimator with the base prediction supplied by the caller (`M` evaluations).
pub fn estimate_with_base(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    eps: &[f64],
    samples: usize,
    rng: &mut RngStream,
) -> Result<StepEstimate> {
    if samples < 2 {
        return Err(Error::config("uncertainty needs M >= 2 samples"));
    }
    let draws: Vec<Vec<f64>> = (0..samples).map(|_| rng.gaussian_vec(x_t.len())).collect();
    let (map, scores) = uncertainty_from_draws(predictor, schedule, x_t, t, eps, &draws)?;
    Ok(StepEstimate { map, draws, scores })
}

/// Full estimator: base prediction plus `M` re-noised predictions
/// (`M + 1` evaluations).
pub fn estimate_step_uncertainty(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    samples: usize,
    rng: &mut RngStream,
) -> Result<StepEstimate> {
    if samples < 2 {
        return Err(Error::config("uncertainty needs M >= 2 samples"));
    }
    let eps = predictor.predict(x_t, t)?;
    estimate_with_base(predictor, schedule, x_t, t, &eps, samples, rng)
}

/// Baseline: variance of predictions at `x_t + σ_p z_i`.
pub fn gaussian_perturbation_uncertainty(
    predictor: &dyn NoisePredictor,
    x_t: &[f64],
    t: usize,
    samples: usize,
    sigma_p: f64,
    rng: &mut RngStream,
) -> Result<UncertaintyMap> {
    if samples < 2 {
        return Err(Error::config("uncertainty needs M >= 2 samples"));
    }
    if !(sigma_p > 0.0) {
        return Err(Error::config("Gaussian perturbation needs sigma > 0"));
    }
    let outputs = (0..samples)
        .map(|_| {
            let x: Vec<f64> = x_t.iter().map(|v| v + sigma_p * rng.gaussian()).collect();
            predictor.predict(&x, t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UncertaintyMap {
        t,
        values: mean_and_variance(&outputs).1,
    })
}

/// Sum of all components of the maps whose step index falls in the window.
/// `maps` pairs each map with its 0-based plan step index.
pub fn aggregate_uncertainty(
    maps: &[(usize, UncertaintyMap)],
    window: [f64; 2],
    plan: &TimestepPlan,
) -> Result<f64> {
    validate_window(window)?;
    let selected = plan.window_indices(window[0], window[1]);
    if selected.is_empty() {
        return Err(Error::config("uncertainty window selects no steps"));
    }
    let mut total = 0.0;
    for &i in &selected {
        let mut found = false;
        for (_, map) in maps.iter().filter(|(s, _)| *s == i) {
            total += map.total();
            found = true;
        }
        if !found {
            return Err(Error::config(format!("no uncertainty map for window step {i}")));
        }
    }
    Ok(total)
}

/// Columnwise mean and unbiased standard deviation of a samples × steps
/// matrix.
pub fn uncertainty_profile(per_step_totals: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if per_step_totals.len() < 2 {
        return Err(Error::config("profile needs at least two samples"));
    }
    let s = per_step_totals[0].len();
    for row in per_step_totals {
        check_len(s, row.len())?;
    }
    let (mean, var) = mean_and_variance(per_step_totals);
    Ok((mean, var.into_iter().map(f64::sqrt).collect()))
}

/// Something that produces an uncertainty map for a sampler state.
pub trait UncertaintySource: Sync {
    fn estimate(
        &self,
        predictor: &dyn NoisePredictor,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        eps: &[f64],
        rng: &mut RngStream,
    ) -> Result<UncertaintyMap>;
}

/// A perturbation scheme paired with its sample count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub scheme: PerturbationScheme,
    pub samples: usize,
}

impl From<&UncertaintyConfig> for Perturbation {
    fn from(c: &UncertaintyConfig) -> Self {
        Self {
            scheme: c.scheme,
            samples: c.samples,
        }
    }
}

impl UncertaintySource for Perturbation {
    fn estimate(
        &self,
        predictor: &dyn NoisePredictor,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        eps: &[f64],
        rng: &mut RngStream,
    ) -> Result<UncertaintyMap> {
        match self.scheme {
            PerturbationScheme::Diffusion => {
                Ok(estimate_with_base(predictor, schedule, x_t, t, eps, self.samples, rng)?.map)
            }
            PerturbationScheme::Gaussian { sigma } => {
                gaussian_perturbation_uncertainty(predictor, x_t, t, self.samples, sigma, rng)
            }
        }
    }
}

/// Variance of stochastic dropout passes of an MLP at the sampler state.
pub struct McDropout<'a> {
    pub mlp: &'a Mlp,
    pub passes: usize,
}

impl UncertaintySource for McDropout<'_> {
    fn estimate(
        &self,
        _predictor: &dyn NoisePredictor,
        _schedule: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        _eps: &[f64],
        rng: &mut RngStream,
    ) -> Result<UncertaintyMap> {
        let (_, values) = mc_dropout_uncertainty(self.mlp, x_t, t, self.passes, rng)?;
        Ok(UncertaintyMap { t, values })
    }
}

/// Sampler hook that records uncertainty maps on selected steps.
pub struct UncertaintyRecorder<'a> {
    source: &'a dyn UncertaintySource,
    steps: Vec<usize>,
    pub maps: Vec<(usize, UncertaintyMap)>,
}

impl<'a> UncertaintyRecorder<'a> {
    /// Record on the steps of `plan` that fall inside `window`.
    pub fn windowed(source: &'a dyn UncertaintySource, plan: &TimestepPlan, window: [f64; 2]) -> Self {
        Self::on_steps(source, plan.window_indices(window[0], window[1]))
    }

    /// Record on every step.
    pub fn every_step(source: &'a dyn UncertaintySource, plan: &TimestepPlan) -> Self {
        Self::on_steps(source, (0..plan.len()).collect())
    }

    pub fn on_steps(source: &'a dyn UncertaintySource, steps: Vec<usize>) -> Self {
        Self {
            source,
            steps,
            maps: Vec::new(),
        }
    }

    /// Componentwise sum of all recorded maps.
    pub fn accumulated(&self) -> Option<Vec<f64>> {
        let first = self.maps.first()?;
        let mut acc = vec![0.0; first.1.values.len()];
        for (_, m) in &self.maps {
            for (a, v) in acc.iter_mut().zip(&m.values) {
                *a += v;
            }
        }
        Some(acc)
    }
}

impl StepHook for UncertaintyRecorder<'_> {
    fn on_step(&mut self, ctx: &mut StepContext<'_>, predictor: &dyn NoisePredictor) -> Result<()> {
        if self.steps.contains(&ctx.step) {
            let map = self
                .source
                .estimate(predictor, ctx.schedule, ctx.x_t, ctx.t, ctx.eps, ctx.rng)?;
            self.maps.push((ctx.step, map));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::FnPredictor;
    use proptest::prelude::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    /// Exact predictor of point-mass data at the origin: `ε = x / σ_t`.
    fn linear_predictor(s: &NoiseSchedule) -> impl NoisePredictor + '_ {
        FnPredictor::new(1, move |x: &[f64], t| x.iter().map(|v| v / s.sigma(t)).collect())
    }

    #[test]
    fn frozen_two_draws_give_two() {
        let s = schedule();
        let p = linear_predictor(&s);
        let eps = p.predict(&[0.4], 30).unwrap();
        let (map, _) =
            uncertainty_from_draws(&p, &s, &[0.4], 30, &eps, &[vec![0.0], vec![2.0]]).unwrap();
        assert!((map.values[0] - 2.0).abs() < 1e-12, "{:?}", map.values);
    }

    #[test]
    fn identical_draws_give_zero() {
        let s = schedule();
        let p = FnPredictor::new(2, |x: &[f64], _| x.iter().map(|v| v.powi(3)).collect());
        let draws = vec![vec![0.3, -0.1]; 4];
        let (map, _) = uncertainty_from_draws(&p, &s, &[0.5, 0.2], 60, &[0.1, 0.1], &draws).unwrap();
        assert_eq!(map.values, vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_single_sample() {
        let s = schedule();
        let p = linear_predictor(&s);
        let mut rng = RngStream::new(0, 0);
        assert!(estimate_step_uncertainty(&p, &s, &[0.1], 10, 1, &mut rng).is_err());
        assert!(gaussian_perturbation_uncertainty(&p, &[0.1], 10, 1, 0.1, &mut rng).is_err());
        assert!(gaussian_perturbation_uncertainty(&p, &[0.1], 10, 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn estimator_costs_m_plus_one() {
        let s = schedule();
        let p = linear_predictor(&s);
        let counted = crate::score::CountingPredictor::new(&p);
        let mut rng = RngStream::new(0, 0);
        let est = estimate_step_uncertainty(&counted, &s, &[0.1], 10, 5, &mut rng).unwrap();
        assert_eq!(counted.count(), 6);
        assert_eq!(est.draws.len(), 5);
    }

    #[test]
    fn gaussian_scheme_on_linear_and_constant_predictors() {
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap(); // sigma = 0.5
        let p = linear_predictor(&s);
        let mut rng = RngStream::new(12, 0);
        let u = gaussian_perturbation_uncertainty(&p, &[0.3], 1, 50_000, 0.1, &mut rng).unwrap();
        assert!((u.values[0] - 0.04).abs() < 0.04 * 0.03, "{}", u.values[0]);

        let tiny = gaussian_perturbation_uncertainty(&p, &[0.3], 1, 50, 1e-9, &mut rng).unwrap();
        assert!(tiny.values[0] < 1e-15);

        let c = FnPredictor::new(1, |_: &[f64], _| vec![0.7]);
        let u = gaussian_perturbation_uncertainty(&c, &[0.3], 1, 10, 3.0, &mut rng).unwrap();
        assert_eq!(u.values, vec![0.0]);
    }

    #[test]
    fn aggregate_cases() {
        let plan = TimestepPlan::uniform(10, 5).unwrap();
        let maps = vec![
            (3, UncertaintyMap { t: 4, values: vec![1.0, 2.0] }),
            (4, UncertaintyMap { t: 2, values: vec![3.0, 4.0] }),
        ];
        assert_eq!(aggregate_uncertainty(&maps, [0.6, 0.8], &plan).unwrap(), 10.0);
        assert!(aggregate_uncertainty(&maps, [0.1, 0.15], &plan).is_err());
        assert!(aggregate_uncertainty(&maps, [0.2, 0.8], &plan).is_err());
    }

    #[test]
    fn default_window_costs_twenty_evaluations() {
        let plan = TimestepPlan::uniform(1000, 50).unwrap();
        let steps = plan.window_indices(0.90, 0.96);
        assert_eq!(steps, vec![45, 46, 47, 48]);
        assert_eq!(steps.len() * DEFAULT_SAMPLES, 20);
    }

    #[test]
    fn profile_cases() {
        let (m, sd) = uncertainty_profile(&[vec![1.0, 5.0], vec![1.0, 5.0]]).unwrap();
        assert_eq!(m, vec![1.0, 5.0]);
        assert_eq!(sd, vec![0.0, 0.0]);
        let (m, sd) = uncertainty_profile(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(m, vec![1.0, 2.0]);
        assert!(sd.iter().all(|v| (v - 2f64.sqrt()).abs() < 1e-15));
        assert!(uncertainty_profile(&[vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn variance_nonnegative_and_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..8),
            rot in 0usize..8,
        ) {
            let (_, v) = mean_and_variance(&rows);
            prop_assert!(v.iter().all(|x| *x >= 0.0));
            let mut perm = rows.clone();
            let k = rot % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            let (_, w) = mean_and_variance(&perm);
            for (a, b) in v.iter().zip(&w) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
            let zero_iff_equal = v.iter().enumerate().all(|(i, x)| {
                let equal = rows.iter().all(|r| r[i] == rows[0][i]);
                (*x == 0.0) == equal
            });
            prop_assert!(zero_iff_equal);
        }
    }
}
