//! A small tanh MLP noise predictor trained by denoising score matching.
//!
//! The network input is `concat(x, fourier(t / T))` where the Fourier block
//! holds `sin(2^f π t/T), cos(2^f π t/T)` for `f = 0..F`. Hidden layers use
//! tanh followed by (inverted) dropout; the output layer is linear.
//! Gradients are hand-written backprop, checked against finite differences
//! in the test suite.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::schedule::NoiseSchedule;
use crate::score::NoisePredictor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Data dimension `D`. Filled from the training data by [`train_dsm`]
    /// when zero.
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_fourier_pairs")]
    pub fourier_pairs: usize,
    /// Number of diffusion timesteps `T` used to normalize `t`. Filled from
    /// the schedule by [`train_dsm`] when zero.
    #[serde(default)]
    pub timesteps: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_fourier_pairs() -> usize {
    4
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    300
}

impl MlpConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: default_hidden(),
            fourier_pairs: default_fourier_pairs(),
            timesteps: 0,
            dropout_rate: 0.0,
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("MLP dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.input_dim + 2 * self.fourier_pairs
    }

    /// Layer widths from network input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim()];
        w.extend(&self.hidden);
        w.push(self.input_dim);
        w
    }

    fn features(&self, x: &[f64], t: usize) -> Vec<f64> {
        let s = t as f64 / self.timesteps.max(1) as f64;
        let mut f = Vec::with_capacity(self.feature_dim());
        f.extend_from_slice(x);
        for k in 0..self.fourier_pairs {
            let w = (1u64 << k) as f64 * std::f64::consts::PI * s;
            f.push(w.sin());
            f.push(w.cos());
        }
        f
    }
}

/// Dense layer, weights stored row-major as `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(config: &MlpConfig) -> Self {
        let w = config.widths();
        Self {
            layers: w.windows(2).map(|p| Layer::zeros(p[0], p[1])).collect(),
        }
    }

    /// Gaussian weights scaled by `1/√fan_in`, zero biases.
    pub fn init(config: &MlpConfig, rng: &mut RngStream) -> Self {
        let mut params = Self::zeros(config);
        for layer in &mut params.layers {
            let scale = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = scale * rng.gaussian();
            }
        }
        params
    }

    pub fn check_shapes(&self, config: &MlpConfig) -> Result<()> {
        let w = config.widths();
        if self.layers.len() + 1 != w.len() {
            return Err(Error::config(format!(
                "expected {} layers, found {}",
                w.len() - 1,
                self.layers.len()
            )));
        }
        for (layer, pair) in self.layers.iter().zip(w.windows(2)) {
            check_len(pair[0], layer.inputs)?;
            check_len(pair[1], layer.outputs)?;
            check_len(layer.inputs * layer.outputs, layer.weights.len())?;
            check_len(layer.outputs, layer.bias.len())?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn axpy(&mut self, scale: f64, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

struct ForwardCache {
    /// Input to each layer; the first entry is the feature vector.
    inputs: Vec<Vec<f64>>,
    /// tanh outputs of hidden layers before dropout.
    activations: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per hidden layer (empty when disabled).
    masks: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward_cached(
    params: &MlpParams,
    config: &MlpConfig,
    x: &[f64],
    t: usize,
    mut dropout: Option<&mut RngStream>,
) -> Result<ForwardCache> {
    check_len(config.input_dim, x.len())?;
    let rate = config.dropout_rate;
    let keep = 1.0 - rate;
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut activations = Vec::with_capacity(n - 1);
    let mut masks = Vec::with_capacity(n - 1);
    let mut current = config.features(x, t);
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(&current);
        inputs.push(current);
        if i + 1 == n {
            return Ok(ForwardCache {
                inputs,
                activations,
                masks,
                output: z,
            });
        }
        let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
        let mask: Vec<f64> = match dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => (0..a.len())
                .map(|_| if rng.uniform() > rate { 1.0 / keep } else { 0.0 })
                .collect(),
            _ => Vec::new(),
        };
        current = if mask.is_empty() {
            a.clone()
        } else {
            a.iter().zip(&mask).map(|(v, m)| v * m).collect()
        };
        activations.push(a);
        masks.push(mask);
    }
    unreachable!("network has at least one layer")
}

/// Forward pass. Dropout is active only when a mask source is given and the
/// configured rate is positive.
pub fn mlp_forward(
    params: &MlpParams,
    config: &MlpConfig,
    x: &[f64],
    t: usize,
    dropout: Option<&mut RngStream>,
) -> Result<Vec<f64>> {
    Ok(forward_cached(params, config, x, t, dropout)?.output)
}

fn backward(params: &MlpParams, cache: &ForwardCache, grad_out: Vec<f64>, grads: &mut MlpParams) {
    let mut delta = grad_out;
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let input = &cache.inputs[i];
        let g = &mut grads.layers[i];
        for (o, d) in delta.iter().enumerate() {
            g.bias[o] += d;
            let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (w, v) in row.iter_mut().zip(input) {
                *w += d * v;
            }
        }
        if i == 0 {
            break;
        }
        let mut back = vec![0.0; layer.inputs];
        for (o, d) in delta.iter().enumerate() {
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (b, w) in back.iter_mut().zip(row) {
                *b += d * w;
            }
        }
        let a = &cache.activations[i - 1];
        let mask = &cache.masks[i - 1];
        for (j, b) in back.iter_mut().enumerate() {
            let m = if mask.is_empty() { 1.0 } else { mask[j] };
            *b *= m * (1.0 - a[j] * a[j]);
        }
        delta = back;
    }
}

/// `‖ε̂ − target‖²` and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &MlpParams,
    config: &MlpConfig,
    x: &[f64],
    t: usize,
    target: &[f64],
    dropout: Option<&mut RngStream>,
) -> Result<(f64, MlpParams)> {
    check_len(config.input_dim, target.len())?;
    let cache = forward_cached(params, config, x, t, dropout)?;
    let resid: Vec<f64> = cache.output.iter().zip(target).map(|(o, y)| o - y).collect();
    let loss = resid.iter().map(|r| r * r).sum();
    let mut grads = MlpParams::zeros(config);
    backward(params, &cache, resid.iter().map(|r| 2.0 * r).collect(), &mut grads);
    Ok((loss, grads))
}

/// A trained network bundled with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(config: MlpConfig, params: MlpParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, x: &[f64], t: usize, dropout: Option<&mut RngStream>) -> Result<Vec<f64>> {
        mlp_forward(&self.params, &self.config, x, t, dropout)
    }
}

impl NoisePredictor for Mlp {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.forward(x, t, None)
    }
}

/// Trains with plain minibatch SGD on the denoising objective
/// `E ‖ε − ε_θ(√ᾱ_t x_0 + σ_t ε, t)‖²` over uniform `t` and Gaussian `ε`.
/// Returns the network and the per-epoch mean loss (per component).
pub fn train_dsm(
    data: &[Vec<f64>],
    schedule: &NoiseSchedule,
    config: &MlpConfig,
) -> Result<(Mlp, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut config = config.clone();
    if config.input_dim == 0 {
        config.input_dim = data[0].len();
    }
    if config.timesteps == 0 {
        config.timesteps = schedule.timesteps();
    } else if config.timesteps != schedule.timesteps() {
        return Err(Error::config(format!(
            "MLP expects T = {}, schedule has T = {}",
            config.timesteps,
            schedule.timesteps()
        )));
    }
    config.validate()?;
    for x in data {
        check_len(config.input_dim, x.len())?;
    }

    let mut init_rng = Purpose::Training.stream(config.seed, 0);
    let mut params = MlpParams::init(&config, &mut init_rng);
    let mut order_rng = Purpose::Shuffle.stream(config.seed, 0);
    let mut noise_rng = Purpose::Training.stream(config.seed, 1);
    let mut dropout_rng = Purpose::Dropout.stream(config.seed, 0);
    let use_dropout = config.dropout_rate > 0.0;

    let d = config.input_dim as f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = MlpParams::zeros(&config);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let t = 1 + noise_rng.below(schedule.timesteps() as u64) as usize;
                let scale = schedule.alpha_bar(t).sqrt();
                let sigma = schedule.sigma(t);
                let eps = noise_rng.gaussian_vec(config.input_dim);
                let xt: Vec<f64> = data[idx]
                    .iter()
                    .zip(&eps)
                    .map(|(x0, e)| scale * x0 + sigma * e)
                    .collect();
                let cache = forward_cached(
                    &params,
                    &config,
                    &xt,
                    t,
                    use_dropout.then_some(&mut dropout_rng),
                )?;
                let resid: Vec<f64> = cache.output.iter().zip(&eps).map(|(o, e)| o - e).collect();
                batch_loss += resid.iter().map(|r| r * r).sum::<f64>();
                backward(&params, &cache, resid.iter().map(|r| 2.0 * r).collect(), &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training loss diverged at epoch {epoch} (lr = {})",
                    config.learning_rate
                )));
            }
            let norm = batch.len() as f64 * d;
            params.axpy(-config.learning_rate / norm, &grads);
            epoch_loss += batch_loss;
        }
        curve.push(epoch_loss / (data.len() as f64 * d));
    }
    Ok((Mlp { config, params }, curve))
}

/// Sample mean and unbiased variance of `passes` stochastic forward passes.
pub fn mc_dropout_uncertainty(
    mlp: &Mlp,
    x: &[f64],
    t: usize,
    passes: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if passes < 2 {
        return Err(Error::config("MC-Dropout needs at least two passes"));
    }
    let outputs = (0..passes)
        .map(|_| mlp.forward(x, t, Some(rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::uncertainty::mean_and_variance(&outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> MlpConfig {
        MlpConfig {
            hidden: vec![8, 6],
            timesteps: 100,
            ..MlpConfig::new(3)
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = small_config();
        let params = MlpParams::zeros(&cfg);
        let out = mlp_forward(&params, &cfg, &[1.0, -2.0, 0.5], 40, None).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn deterministic_without_dropout_source() {
        let cfg = MlpConfig {
            dropout_rate: 0.5,
            ..small_config()
        };
        let params = MlpParams::init(&cfg, &mut RngStream::new(1, 0));
        let a = mlp_forward(&params, &cfg, &[0.1, 0.2, 0.3], 10, None).unwrap();
        let b = mlp_forward(&params, &cfg, &[0.1, 0.2, 0.3], 10, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = small_config();
        let params = MlpParams::zeros(&cfg);
        assert!(matches!(
            mlp_forward(&params, &cfg, &[1.0], 1, None),
            Err(Error::Shape { .. })
        ));
        let other = MlpConfig {
            hidden: vec![4],
            ..small_config()
        };
        assert!(Mlp::new(other, params).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cfg = MlpConfig {
            epochs: 0,
            seed: 11,
            ..small_config()
        };
        let (mlp, curve) = train_dsm(&[vec![0.0; 3]], &s, &cfg).unwrap();
        assert!(curve.is_empty());
        let expect = MlpParams::init(&mlp.config, &mut Purpose::Training.stream(11, 0));
        assert_eq!(mlp.params, expect);
    }

    #[test]
    fn divergence_reported_as_numeric_error() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let cfg = MlpConfig {
            learning_rate: 1e12,
            epochs: 200,
            ..small_config()
        };
        let data: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64; 3]).collect();
        assert!(matches!(train_dsm(&data, &s, &cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn dropout_rate_zero_has_zero_variance() {
        let cfg = small_config();
        let params = MlpParams::init(&cfg, &mut RngStream::new(2, 0));
        let mlp = Mlp::new(cfg, params).unwrap();
        let mut rng = RngStream::new(5, 0);
        let (_, var) = mc_dropout_uncertainty(&mlp, &[0.3, 0.1, -0.4], 12, 6, &mut rng).unwrap();
        assert_eq!(var, vec![0.0; 3]);
        assert!(mc_dropout_uncertainty(&mlp, &[0.3, 0.1, -0.4], 12, 1, &mut rng).is_err());
    }

    #[test]
    fn dropout_variance_nonnegative() {
        let cfg = MlpConfig {
            dropout_rate: 0.3,
            ..small_config()
        };
        let params = MlpParams::init(&cfg, &mut RngStream::new(2, 0));
        let mlp = Mlp::new(cfg, params).unwrap();
        let mut rng = RngStream::new(8, 0);
        for k in 0..20 {
            let x = RngStream::new(9, k).gaussian_vec(3);
            let (_, var) = mc_dropout_uncertainty(&mlp, &x, 1 + k as usize, 4, &mut rng).unwrap();
            assert!(var.iter().all(|v| *v >= 0.0));
        }
    }
}
