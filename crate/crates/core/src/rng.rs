//! Counter-based random streams.
//!
//! Every draw consumes exactly one 128-bit block of a ChaCha8 keystream
//! addressed by `(seed, stream_id, counter)`, so the value at a given counter
//! never depends on how earlier draws were interleaved.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};

/// Words (u32) of keystream consumed per draw.
const WORDS_PER_DRAW: u128 = 4;

/// Well-known stream ids so independent consumers never share draws.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PROJECTOR: u64 = 3;
    pub const FLOW_NOISE: u64 = 4;
    pub const FLOW_TAU: u64 = 5;
    pub const HISTORY_AUG: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const ROLLOUT: u64 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution<'a> {
    Normal,
    Uniform,
    Categorical(&'a [f64]),
}

#[derive(Clone)]
pub struct RngStream {
    state: RngState,
    core: ChaCha8Rng,
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream").field("state", &self.state).finish()
    }
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::from_state(RngState {
            seed,
            stream_id,
            counter: 0,
        })
    }

    pub fn from_state(state: RngState) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(state.seed);
        core.set_stream(state.stream_id);
        core.set_word_pos(state.counter as u128 * WORDS_PER_DRAW);
        Self { state, core }
    }

    /// Derive a child stream; `sub` is folded into the stream id.
    pub fn fork(seed: u64, stream_id: u64, sub: u64) -> Self {
        Self::new(seed, stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sub)
    }

    pub fn state(&self) -> RngState {
        self.state
    }

    pub fn counter(&self) -> u64 {
        self.state.counter
    }

    pub fn set_counter(&mut self, counter: u64) {
        *self = Self::from_state(RngState {
            counter,
            ..self.state
        });
    }

    fn block(&mut self) -> (u64, u64) {
        let a = self.core.next_u64();
        let b = self.core.next_u64();
        self.state.counter += 1;
        (a, b)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        let (a, _) = self.block();
        (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch only, one value per draw).
    pub fn normal(&mut self) -> f64 {
        let (a, b) = self.block();
        // u1 in (0, 1] keeps ln finite
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize> {
        let total = validate_weights(weights)?;
        let u = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
                acc += w;
                if u < acc {
                    return Ok(i);
                }
            }
        }
        Ok(last_positive)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Advances the counter by exactly `n`. Categorical indices are returned as `f64`.
    pub fn draw(&mut self, kind: Distribution<'_>, n: usize) -> Result<Vec<f64>> {
        match kind {
            Distribution::Normal => Ok(self.normals(n)),
            Distribution::Uniform => Ok(self.uniforms(n)),
            Distribution::Categorical(w) => {
                validate_weights(w)?;
                (0..n).map(|_| self.categorical(w).map(|i| i as f64)).collect()
            }
        }
    }
}

fn validate_weights(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(WamError::InvalidArgument(
            "categorical weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(WamError::InvalidArgument(
            "categorical weights are all zero".into(),
        ));
    }
    Ok(total)
}
