//! Discrete-time reverse chains: DDPM ancestral steps and deterministic DDIM
//! steps (η = 0), driven along a [`TimestepPlan`] with per-step hooks.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::schedule::{NoiseSchedule, TimestepPlan};
use crate::score::{CountingPredictor, NoisePredictor};

/// `x̂_0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::config(format!("alpha_bar must lie in (0, 1], got {alpha_bar}")));
    }
    check_len(x_t.len(), eps.len())?;
    let sigma = (1.0 - alpha_bar).sqrt();
    let scale = alpha_bar.sqrt();
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - sigma * e) / scale).collect())
}

/// Deterministic DDIM update: `√ᾱ_prev x̂_0 + √(1−ᾱ_prev) ε̂`.
pub fn ddim_step(x_t: &[f64], eps: &[f64], alpha_bar: f64, alpha_bar_prev: f64) -> Result<Vec<f64>> {
    if !(alpha_bar > 0.0 && alpha_bar <= alpha_bar_prev && alpha_bar_prev <= 1.0) {
        return Err(Error::config(format!(
            "DDIM needs 0 < alpha_bar_t <= alpha_bar_prev <= 1, got {alpha_bar} and {alpha_bar_prev}"
        )));
    }
    if alpha_bar == alpha_bar_prev {
        return Ok(x_t.to_vec());
    }
    let x0 = predict_x0(x_t, eps, alpha_bar)?;
    let a = alpha_bar_prev.sqrt();
    let b = (1.0 - alpha_bar_prev).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `β_t`, as written in the reverse kernel `N(μ_θ, β_t I)`.
    #[default]
    Beta,
    /// `β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t) · β_t`.
    BetaTilde,
}

fn ancestral_update(
    x_t: &[f64],
    eps: &[f64],
    alpha_bar: f64,
    alpha_bar_prev: f64,
    beta: f64,
    variance: PosteriorVariance,
    noise: Option<&[f64]>,
) -> Vec<f64> {
    let coef = beta / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let std = match variance {
        PosteriorVariance::Beta => beta.sqrt(),
        PosteriorVariance::BetaTilde => ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta).sqrt(),
    };
    let mean = x_t.iter().zip(eps).map(|(x, e)| inv_sqrt_alpha * (x - coef * e));
    match noise {
        Some(z) => mean.zip(z).map(|(m, z)| m + std * z).collect(),
        None => mean.collect(),
    }
}

/// One ancestral step from `t` to `t − 1`:
/// `μ = (x_t − β_t/√(1−ᾱ_t) ε̂)/√α_t`, `x_{t−1} = μ + √β_t · noise`.
/// The noise term is dropped at `t = 1`.
pub fn ddpm_step(
    x_t: &[f64],
    eps: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    check_len(x_t.len(), eps.len())?;
    check_len(x_t.len(), noise.len())?;
    Ok(ancestral_update(
        x_t,
        eps,
        schedule.alpha_bar(t),
        schedule.alpha_bar(t - 1),
        schedule.beta(t),
        PosteriorVariance::Beta,
        (t > 1).then_some(noise),
    ))
}

/// Reparametrized draw from `q(x_t | x̂_0)`: `√ᾱ_t x̂_0 + √(1−ᾱ_t) ε`.
pub fn renoise(x0: &[f64], schedule: &NoiseSchedule, t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    check_len(x0.len(), eps.len())?;
    let scale = schedule.alpha_bar(t).sqrt();
    let sigma = schedule.sigma(t);
    Ok(x0.iter().zip(eps).map(|(x, e)| scale * x + sigma * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub plan: TimestepPlan,
    /// Root seed of the run.
    pub seed: u64,
    /// Per-sample stream index; sampler noise and hook draws come from
    /// streams addressed by `(seed, stream)`.
    pub stream: u64,
    pub variance: PosteriorVariance,
    /// Keep every intermediate state in the trajectory.
    pub record_states: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, plan: TimestepPlan, seed: u64) -> Self {
        Self {
            kind,
            plan,
            seed,
            stream: 0,
            variance: PosteriorVariance::Beta,
            record_states: true,
        }
    }

    pub fn with_stream(&self, stream: u64) -> Self {
        Self {
            stream,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(t, x_t)` before each step, in sampling order.
    pub states: Vec<(usize, Vec<f64>)>,
    pub final_sample: Vec<f64>,
    /// Predictor evaluations, including those made by hooks.
    pub nfe: u64,
}

/// What a hook sees after the base predictor call of a step.
pub struct StepContext<'a> {
    /// 0-based position in the plan; 0 is the first step at the noisiest `t`.
    pub step: usize,
    pub num_steps: usize,
    pub t: usize,
    pub t_prev: usize,
    pub schedule: &'a NoiseSchedule,
    pub x_t: &'a [f64],
    /// Predicted noise that will drive the step. Hooks may modify it.
    pub eps: &'a mut Vec<f64>,
    /// Stream reserved for hook randomness; independent of sampler noise.
    pub rng: &'a mut RngStream,
}

impl StepContext<'_> {
    pub fn progress(&self) -> f64 {
        self.step as f64 / self.num_steps as f64
    }
}

pub trait StepHook {
    /// Called once per step after the base prediction. `predictor` counts
    /// every call toward the trajectory's NFE.
    fn on_step(&mut self, ctx: &mut StepContext<'_>, predictor: &dyn NoisePredictor) -> Result<()>;
}

pub fn run_sampler<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    x_t: &[f64],
) -> Result<Trajectory> {
    run_sampler_with_hooks(predictor, schedule, config, x_t, &mut [])
}

pub fn run_sampler_with_hooks<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    x_start: &[f64],
    hooks: &mut [&mut dyn StepHook],
) -> Result<Trajectory> {
    check_len(predictor.dim(), x_start.len())?;
    let plan = &config.plan;
    if plan.is_empty() {
        return Err(Error::config("empty timestep plan"));
    }
    if plan.steps()[0] > schedule.timesteps() {
        return Err(Error::config("plan exceeds schedule length"));
    }
    let counted = CountingPredictor::new(predictor);
    let mut noise_rng = Purpose::SamplerNoise.stream(config.seed, config.stream);
    let mut hook_rng = Purpose::Perturbation.stream(config.seed, config.stream);
    let mut states = Vec::with_capacity(if config.record_states { plan.len() } else { 0 });
    let mut x = x_start.to_vec();

    for (step, &t) in plan.steps().iter().enumerate() {
        let t_prev = plan.prev(step);
        let tag = |e: Error| e.at_step(step, t);
        let mut eps = counted.predict(&x, t).map_err(tag)?;
        for hook in hooks.iter_mut() {
            let mut ctx = StepContext {
                step,
                num_steps: plan.len(),
                t,
                t_prev,
                schedule,
                x_t: &x,
                eps: &mut eps,
                rng: &mut hook_rng,
            };
            hook.on_step(&mut ctx, &counted).map_err(tag)?;
        }
        check_len(x.len(), eps.len()).map_err(tag)?;

        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let next = match config.kind {
            SamplerKind::Ddim => ddim_step(&x, &eps, ab, ab_prev).map_err(tag)?,
            SamplerKind::Ddpm => {
                // Strided plans use the effective rate between plan entries.
                let beta = if t_prev + 1 == t {
                    schedule.beta(t)
                } else {
                    1.0 - ab / ab_prev
                };
                let noise = (t_prev > 0).then(|| noise_rng.gaussian_vec(x.len()));
                ancestral_update(&x, &eps, ab, ab_prev, beta, config.variance, noise.as_deref())
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(tag(Error::numeric("non-finite state")));
        }
        if config.record_states {
            states.push((t, std::mem::replace(&mut x, next)));
        } else {
            x = next;
        }
    }
    Ok(Trajectory {
        states,
        final_sample: x,
        nfe: counted.count(),
    })
}
