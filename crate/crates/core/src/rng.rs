//! Counter-derived random streams.
//!
//! Every random quantity in a run comes from a [`RngStream`] identified by
//! `(root_seed, stream_index)`. A stream's initial state is
//! `splitmix64(root_seed ^ GOLDEN * (index + 1))`; draws then follow the
//! plain splitmix64 sequence. Uniforms take the top 53 bits of a draw and map
//! them to `(0, 1]`, and Gaussians use Box–Muller over consecutive uniform
//! pairs, emitting the cosine branch first and the sine branch second.
//!
//! Because streams are addressed rather than shared, work split across
//! threads sees the same numbers regardless of scheduling.

/// 2^64 / golden ratio, the splitmix64 increment.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One splitmix64 step from state `x`: advance by the golden gamma, then mix.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    mix64(x.wrapping_add(GOLDEN_GAMMA))
}

/// Seed of stream `index` under `root`. Also used to derive nested roots.
#[inline]
pub fn derive_seed(root: u64, index: u64) -> u64 {
    splitmix64(root ^ GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1)))
}

/// Named sub-roots so that different consumers of one run seed never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Initial points `X_T`.
    Prior = 0,
    /// Ancestral-sampling noise.
    SamplerNoise = 1,
    /// Re-noising draws of the uncertainty estimator.
    Perturbation = 2,
    /// Ground-truth reference draws and test sets.
    Reference = 3,
    /// Shuffles, random baselines, pool subsampling.
    Shuffle = 4,
    Training = 5,
    Dropout = 6,
}

impl Purpose {
    pub fn root(self, seed: u64) -> u64 {
        derive_seed(seed, 0x5EED_0000 + self as u64)
    }

    pub fn stream(self, seed: u64, index: u64) -> RngStream {
        RngStream::new(self.root(seed), index)
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(root_seed: u64, index: u64) -> Self {
        Self::from_state(derive_seed(root_seed, index))
    }

    pub fn from_state(state: u64) -> Self {
        Self { state, spare: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on `(0, 1]`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53
    }

    /// Uniform integer in `0..n` (n > 0), by rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
