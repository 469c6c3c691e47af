//! Noise schedules and generation-time timestep plans.
//!
//! Timesteps are 1-based: `t = 1..=T`. Position `t = 0` denotes clean data
//! and has `alpha_bar(0) = 1`, `sigma(0) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` at `t = 1` to `beta_end`
    /// at `t = T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (timesteps - 1) as f64;
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("empty beta sequence"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::config(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        let sigmas = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::config(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )))
        } else {
            Ok(())
        }
    }

    // Accessors take 1-based t and panic outside 1..=T; `alpha_bar` and
    // `sigma` additionally accept t = 0.

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigmas[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// Parameters of a linear schedule, as they appear in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_timesteps() -> usize {
    DEFAULT_TIMESTEPS
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Strictly decreasing generation timesteps `τ_S > … > τ_1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    /// Uniform stride `floor(T / S)` anchored at `T`.
    pub fn uniform(timesteps: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || num_steps > timesteps {
            return Err(Error::config(format!(
                "need 1 <= generation steps <= T, got S = {num_steps}, T = {timesteps}"
            )));
        }
        let stride = timesteps / num_steps;
        let steps = (0..num_steps).map(|i| timesteps - i * stride).collect();
        Ok(Self { steps })
    }

    pub fn from_steps(steps: Vec<usize>, timesteps: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::config("empty timestep plan"));
        }
        if steps.iter().any(|&t| t == 0 || t > timesteps) {
            return Err(Error::config(format!("plan entries must lie in 1..={timesteps}")));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("plan must be strictly decreasing"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep reached after step `i`; 0 after the last step.
    pub fn prev(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }

    /// Step indices `i` whose generation progress `i / S` lies in `[lo, hi]`.
    pub fn window_indices(&self, lo: f64, hi: f64) -> Vec<usize> {
        let s = self.len() as f64;
        let eps = 1e-9;
        (0..self.len())
            .filter(|&i| {
                let i = i as f64;
                i >= lo * s - eps && i <= hi * s + eps
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_step_linear_schedule() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.sigma(2) - 0.28f64.sqrt()).abs() < 1e-15);
        assert!((s.sigma(2) - 0.529_150_3).abs() < 1e-7);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.sigma(1), 0.5f64.sqrt());
    }

    #[test]
    fn zero_beta_rejected() {
        assert!(matches!(
            NoiseSchedule::linear(3, 0.0, 0.1),
            Err(Error::Config(_))
        ));
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(3, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(3, 0.1, 1.0).is_err());
    }

    #[test]
    fn from_betas_cases() {
        let a = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(a, NoiseSchedule::linear(2, 0.1, 0.2).unwrap());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, 1.0]).is_err());
        let c = NoiseSchedule::from_betas(vec![0.99]).unwrap();
        assert!((c.alpha_bar(1) - 0.01).abs() < 1e-15);
        assert_eq!(c.sigma(1), (1.0f64 - (1.0 - 0.99)).sqrt());
    }

    #[test]
    fn boundary_at_zero() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.check_t(0).is_err());
        assert!(s.check_t(11).is_err());
        assert!(s.check_t(10).is_ok());
    }

    #[test]
    fn plans() {
        assert_eq!(TimestepPlan::uniform(10, 5).unwrap().steps(), &[10, 8, 6, 4, 2]);
        assert_eq!(TimestepPlan::uniform(5, 5).unwrap().steps(), &[5, 4, 3, 2, 1]);
        assert!(TimestepPlan::uniform(4, 5).is_err());
        assert!(TimestepPlan::uniform(4, 0).is_err());
        assert!(TimestepPlan::from_steps(vec![3, 3], 5).is_err());
        assert!(TimestepPlan::from_steps(vec![6, 3], 5).is_err());
    }

    #[test]
    fn default_window_resolves_to_four_late_steps() {
        let plan = TimestepPlan::uniform(1000, 50).unwrap();
        assert_eq!(plan.window_indices(0.90, 0.96), vec![45, 46, 47, 48]);
        assert_eq!(plan.prev(49), 0);
        assert_eq!(plan.prev(0), 980);
    }

    proptest! {
        #[test]
        fn linear_schedule_invariants(t in 1usize..400, start in 1e-5f64..0.05, extra in 0.0f64..0.3) {
            let end = (start + extra).min(0.999);
            let s = NoiseSchedule::linear(t, start, end).unwrap();
            for i in 1..=t {
                prop_assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
                prop_assert_eq!(s.sigma(i), (1.0 - s.alpha_bar(i)).sqrt());
            }
            let again = NoiseSchedule::from_betas(s.betas().to_vec()).unwrap();
            prop_assert_eq!(again, s);
        }

        #[test]
        fn plan_is_strictly_decreasing_in_range(t in 1usize..2000, frac in 0.0f64..1.0) {
            let s = 1 + ((t - 1) as f64 * frac) as usize;
            let plan = TimestepPlan::uniform(t, s).unwrap();
            prop_assert_eq!(plan.len(), s);
            prop_assert_eq!(plan.steps()[0], t);
            prop_assert!(plan.steps().iter().all(|&x| x >= 1 && x <= t));
            prop_assert!(plan.steps().windows(2).all(|w| w[0] > w[1]));
        }
    }
}
