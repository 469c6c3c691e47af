//! Noise predictors and the analytic quantities of Gaussian-mixture data.
//!
//! A [`NoisePredictor`] maps a state `x_t` at timestep `t` to predicted noise
//! `ε̂`. Noise and score are two units of the same object:
//! `score = −ε / σ_t`. For mixture data the exact marginal `q_t` is again a
//! mixture, so its log density, score and Hessian diagonal are closed form
//! and serve as oracles for everything built on top of predictors.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub trait NoisePredictor: Sync {
    /// Dimension of states and predictions.
    fn dim(&self) -> usize;

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        (**self).predict(x, t)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        (**self).predict(x, t)
    }
}

/// Wraps a predictor and counts every evaluation (NFE).
pub struct CountingPredictor<'a, P: ?Sized> {
    inner: &'a P,
    count: AtomicU64,
}

impl<'a, P: NoisePredictor + ?Sized> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for CountingPredictor<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x, t)
    }
}

/// Adapts a closure into a predictor. Mostly useful for synthetic predictors
/// with closed-form behavior.
pub struct FnPredictor<F> {
    dim: usize,
    f: F,
}

impl<F> FnPredictor<F>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        check_len(self.dim, x.len())?;
        let out = (self.f)(x, t);
        check_len(self.dim, out.len())?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    NoiseToScore,
    ScoreToNoise,
}

/// `noise → score: −ε/σ_t`, `score → noise: −σ_t · score`.
pub fn convert_noise_score(values: &[f64], sigma: f64, direction: Conversion) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    Ok(match direction {
        Conversion::NoiseToScore => values.iter().map(|e| -e / sigma).collect(),
        Conversion::ScoreToNoise => values.iter().map(|s| -sigma * s).collect(),
    })
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities.
pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for l in logits.iter_mut() {
        *l = (*l - lse).exp();
    }
}

/// Axis-aligned Gaussian mixture. Zero variances are allowed and describe
/// point masses; the noised marginal is always non-degenerate for `t ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmDistribution {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmmDistribution {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let dist = Self {
            weights,
            means,
            variances,
        };
        dist.validate()?;
        Ok(dist)
    }

    /// Single component `N(0, I_d)`.
    pub fn standard_normal(dim: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![vec![0.0; dim]],
            variances: vec![vec![1.0; dim]],
        }
    }

    pub fn point_mass(at: Vec<f64>) -> Self {
        let d = at.len();
        Self {
            weights: vec![1.0],
            means: vec![at],
            variances: vec![vec![0.0; d]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::config("mixture has no components"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::config("weights, means and variances disagree on K"));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(Error::config("mixture dimension is zero"));
        }
        if self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return Err(Error::config("mixture components disagree on dimension"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("mixture weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        if self.variances.iter().flatten().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("mixture variances must be finite and nonnegative"));
        }
        if self.means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::config("mixture means must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Marginal of the data pushed through the noising kernel at `t`:
    /// `m_k = √ᾱ_t μ_k`, `v_k = ᾱ_t s_k² + 1 − ᾱ_t`.
    pub fn marginal(&self, schedule: &NoiseSchedule, t: usize) -> Result<GmmMarginal> {
        schedule.check_t(t)?;
        Ok(self.marginal_at(schedule.alpha_bar(t)))
    }

    /// Marginal for an explicit `ᾱ ∈ (0, 1]`. `ᾱ = 1` returns the data itself.
    pub fn marginal_at(&self, alpha_bar: f64) -> GmmMarginal {
        let scale = alpha_bar.sqrt();
        let means = self
            .means
            .iter()
            .map(|mu| mu.iter().map(|m| scale * m).collect())
            .collect();
        let variances = self
            .variances
            .iter()
            .map(|s2| s2.iter().map(|s| alpha_bar * s + 1.0 - alpha_bar).collect())
            .collect();
        let log_weights = self
            .weights
            .iter()
            .map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY })
            .collect();
        GmmMarginal {
            log_weights,
            means,
            variances,
        }
    }

    /// One draw from the data distribution.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.marginal_at(1.0).sample(rng)
    }
}

/// Per-component means and variances of `q_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmMarginal {
    pub log_weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmmMarginal {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.log_weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(lw, (m, v))| {
                let quad: f64 = x
                    .iter()
                    .zip(m.iter().zip(v))
                    .map(|(xi, (mi, vi))| LN_2PI + vi.ln() + (xi - mi).powi(2) / vi)
                    .sum();
                lw - 0.5 * quad
            })
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.component_log_densities(x);
        softmax_in_place(&mut r);
        r
    }

    /// `∇ log q_t(x) = Σ_k r_k(x) · (−(x − m_k)/v_k)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.score_and_hessian_diag(x).0
    }

    /// Diagonal of `∇² log q_t(x)`:
    /// `Σ_k r_k (−1/v_k + g_k²) − g²` with `g_k = −(x − m_k)/v_k`, `g = Σ_k r_k g_k`.
    pub fn hessian_diag(&self, x: &[f64]) -> Vec<f64> {
        self.score_and_hessian_diag(x).1
    }

    pub fn score_and_hessian_diag(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = self.responsibilities(x);
        let d = x.len();
        let mut g = vec![0.0; d];
        let mut second = vec![0.0; d];
        for (rk, (m, v)) in r.iter().zip(self.means.iter().zip(&self.variances)) {
            if *rk == 0.0 {
                continue;
            }
            for i in 0..d {
                let gk = -(x[i] - m[i]) / v[i];
                g[i] += rk * gk;
                second[i] += rk * (gk * gk - 1.0 / v[i]);
            }
        }
        let h = second.iter().zip(&g).map(|(s, gi)| s - gi * gi).collect();
        (g, h)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.log_weights.len() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u <= acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| m + v.sqrt() * rng.gaussian())
            .collect()
    }
}

pub fn gmm_marginal_params(
    dist: &GmmDistribution,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<GmmMarginal> {
    dist.marginal(schedule, t)
}

pub fn gmm_marginal_logpdf(
    dist: &GmmDistribution,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<f64> {
    check_len(dist.dim(), x.len())?;
    Ok(dist.marginal(schedule, t)?.logpdf(x))
}

pub fn gmm_score(
    dist: &GmmDistribution,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    check_len(dist.dim(), x.len())?;
    Ok(dist.marginal(schedule, t)?.score(x))
}

pub fn gmm_hessian_diag(
    dist: &GmmDistribution,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    check_len(dist.dim(), x.len())?;
    Ok(dist.marginal(schedule, t)?.hessian_diag(x))
}

/// Exact noise predictor for mixture data: `ε*(x, t) = −σ_t ∇ log q_t(x)`.
#[derive(Debug, Clone)]
pub struct GmmPredictor {
    dist: GmmDistribution,
    schedule: NoiseSchedule,
}

impl GmmPredictor {
    pub fn new(dist: GmmDistribution, schedule: NoiseSchedule) -> Result<Self> {
        dist.validate()?;
        Ok(Self { dist, schedule })
    }

    pub fn distribution(&self) -> &GmmDistribution {
        &self.dist
    }
}

impl NoisePredictor for GmmPredictor {
    fn dim(&self) -> usize {
        self.dist.dim()
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let score = gmm_score(&self.dist, &self.schedule, x, t)?;
        convert_noise_score(&score, self.schedule.sigma(t), Conversion::ScoreToNoise)
    }
}

/// Bayes-optimal noise predictor for a finite training set (the empirical
/// data distribution).
#[derive(Debug, Clone)]
pub struct DatasetPredictor {
    points: Vec<Vec<f64>>,
    schedule: NoiseSchedule,
}

impl DatasetPredictor {
    pub fn new(points: Vec<Vec<f64>>, schedule: NoiseSchedule) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::config("dataset predictor needs at least one point"))?;
        let d = first.len();
        if d == 0 {
            return Err(Error::config("dataset points have dimension zero"));
        }
        for p in &points {
            check_len(d, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("dataset contains non-finite values"));
            }
        }
        Ok(Self { points, schedule })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Posterior mean `E[X_0 | X_t = x]` under the empirical data.
    pub fn posterior_mean(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.schedule.check_t(t)?;
        check_len(self.points[0].len(), x.len())?;
        let scale = self.schedule.alpha_bar(t).sqrt();
        let var = 1.0 - self.schedule.alpha_bar(t);
        let mut logits: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                let d2: f64 = x.iter().zip(p).map(|(xi, pi)| (xi - scale * pi).powi(2)).sum();
                -d2 / (2.0 * var)
            })
            .collect();
        softmax_in_place(&mut logits);
        let mut mean = vec![0.0; x.len()];
        for (w, p) in logits.iter().zip(&self.points) {
            if *w == 0.0 {
                continue;
            }
            for (m, pi) in mean.iter_mut().zip(p) {
                *m += w * pi;
            }
        }
        Ok(mean)
    }
}

pub fn dataset_predict_noise(model: &DatasetPredictor, x: &[f64], t: usize) -> Result<Vec<f64>> {
    let mean = model.posterior_mean(x, t)?;
    let scale = model.schedule.alpha_bar(t).sqrt();
    let sigma = model.schedule.sigma(t);
    Ok(x.iter().zip(&mean).map(|(xi, m)| (xi - scale * m) / sigma).collect())
}

impl NoisePredictor for DatasetPredictor {
    fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        dataset_predict_noise(self, x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched_with_alpha_bar(ab: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - ab]).unwrap()
    }

    fn two_bumps() -> GmmDistribution {
        GmmDistribution::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            vec![vec![0.25], vec![0.25]],
        )
        .unwrap()
    }

    #[test]
    fn marginal_params() {
        let s = sched_with_alpha_bar(0.72);
        let m = gmm_marginal_params(&GmmDistribution::standard_normal(1), &s, 1).unwrap();
        assert!((m.means[0][0]).abs() < 1e-15);
        assert!((m.variances[0][0] - 1.0).abs() < 1e-15);

        let m = gmm_marginal_params(&GmmDistribution::point_mass(vec![1.0]), &s, 1).unwrap();
        assert!((m.means[0][0] - 0.72f64.sqrt()).abs() < 1e-15);
        assert!((m.means[0][0] - 0.8485).abs() < 1e-4);
        assert!((m.variances[0][0] - 0.28).abs() < 1e-15);

        let m = gmm_marginal_params(&two_bumps(), &s, 1).unwrap();
        assert_eq!(m.log_weights, vec![0.5f64.ln(); 2]);
        assert!((m.variances[1][0] - (0.72 * 0.25 + 0.28)).abs() < 1e-15);
        assert!(gmm_marginal_params(&two_bumps(), &s, 2).is_err());
    }

    #[test]
    fn closed_form_scores() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let g = gmm_score(&GmmDistribution::standard_normal(2), &s, &[0.5, -1.0], 37).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-14 && (g[1] - 1.0).abs() < 1e-14);

        let s = sched_with_alpha_bar(0.72);
        let g = gmm_score(&GmmDistribution::point_mass(vec![0.0]), &s, &[0.28], 1).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_logpdf() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let l = gmm_marginal_logpdf(&GmmDistribution::standard_normal(1), &s, &[0.0], 3).unwrap();
        assert!((l + 0.918_938_5).abs() < 1e-7);

        let s = sched_with_alpha_bar(0.72);
        let l = gmm_marginal_logpdf(&GmmDistribution::point_mass(vec![0.0]), &s, &[0.0], 1).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 0.28f64).ln();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn closed_form_hessians() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for x in [[0.0, 0.0], [3.0, -1.5], [-7.0, 0.1]] {
            let h = gmm_hessian_diag(&GmmDistribution::standard_normal(2), &s, &x, 50).unwrap();
            assert!(h.iter().all(|v| (v + 1.0).abs() < 1e-12));
        }
        let s = sched_with_alpha_bar(0.72);
        let h = gmm_hessian_diag(&GmmDistribution::point_mass(vec![0.0]), &s, &[0.4], 1).unwrap();
        assert!((h[0] + 1.0 / 0.28).abs() < 1e-12);
        assert!((h[0] + 3.571_428_6).abs() < 1e-6);
    }

    #[test]
    fn far_tail_is_stable() {
        // Responsibilities underflow in linear space here.
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let g = gmm_score(&two_bumps(), &s, &[60.0], 1).unwrap();
        let h = gmm_hessian_diag(&two_bumps(), &s, &[60.0], 1).unwrap();
        assert!(g[0].is_finite() && h[0].is_finite());
        let v = s.alpha_bar(1) * 0.25 + 1.0 - s.alpha_bar(1);
        assert!((h[0] + 1.0 / v).abs() < 1e-9);
    }

    #[test]
    fn dataset_predictor_cases() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let single = DatasetPredictor::new(vec![vec![0.0, 0.0]], s.clone()).unwrap();
        let x = [0.3, -1.2];
        let e = dataset_predict_noise(&single, &x, 20).unwrap();
        for (ei, xi) in e.iter().zip(&x) {
            assert!((ei - xi / s.sigma(20)).abs() < 1e-12);
        }

        let c = [1.5, -0.5];
        let at_c = DatasetPredictor::new(vec![c.to_vec()], s.clone()).unwrap();
        let scale = s.alpha_bar(20).sqrt();
        let x: Vec<f64> = c.iter().map(|v| v * scale).collect();
        assert!(dataset_predict_noise(&at_c, &x, 20).unwrap().iter().all(|v| v.abs() < 1e-12));

        let sym = DatasetPredictor::new(vec![c.to_vec(), c.iter().map(|v| -v).collect()], s).unwrap();
        assert!(dataset_predict_noise(&sym, &[0.0, 0.0], 20).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(DatasetPredictor::new(vec![], NoiseSchedule::linear(2, 0.1, 0.2).unwrap()).is_err());
    }

    #[test]
    fn noise_score_conversion() {
        let s = convert_noise_score(&[1.0], 0.5, Conversion::NoiseToScore).unwrap();
        assert_eq!(s, vec![-2.0]);
        assert!(convert_noise_score(&[1.0], 0.0, Conversion::NoiseToScore).is_err());
        let mut rng = RngStream::new(3, 0);
        let v = rng.gaussian_vec(16);
        let there = convert_noise_score(&v, 0.37, Conversion::NoiseToScore).unwrap();
        let back = convert_noise_score(&there, 0.37, Conversion::ScoreToNoise).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GmmDistribution::new(vec![0.6, 0.6], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err());
        assert!(GmmDistribution::new(vec![1.0], vec![vec![0.0]], vec![vec![-1.0]]).is_err());
        assert!(GmmDistribution::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
        assert!(GmmDistribution::new(vec![], vec![], vec![]).is_err());
    }
}
