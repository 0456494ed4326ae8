use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::model::ModelConfig;

use super::{RolloutConfig, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProfile {
    pub step: usize,
    /// Tokens attended from memory while predicting this chunk.
    pub cached_before: usize,
    /// Tokens held after committing this chunk.
    pub tags: usize,
    pub cached_floats: u64,
    pub attention_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub strategy: Strategy,
    pub horizon: usize,
    pub steps: Vec<StepProfile>,
    /// Largest cache in bytes at 8 bytes per float.
    pub peak_cache_bytes: u64,
    pub total_attention_flops: u64,
}

fn held(strategy: Strategy, arrived: usize, budget: usize) -> usize {
    match strategy {
        Strategy::Full => arrived,
        Strategy::Fifo | Strategy::Selective => arrived.min(budget),
    }
}

/// Analytic memory and self-attention cost of a rollout. Keys and values are
/// counted per layer; attention costs `2 * n_q * n_k * d` per layer and pass,
/// over every denoising pass plus the two context passes of each chunk.
pub fn profile_memory_flops(model: &ModelConfig, rollout: &RolloutConfig, horizon: usize) -> Result<ProfileReport> {
    if horizon == 0 {
        return Err(WamError::InvalidArgument("profile horizon must be at least one chunk".into()));
    }
    let (n_x, n_a) = (model.n_x() as u64, model.n_a() as u64);
    let (layers, d) = (model.layers as u64, model.d as u64);
    let s = rollout.strategy;
    let mut steps = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let before = (held(s, k * model.n_x(), rollout.video_budget) + held(s, k * model.n_a(), rollout.action_budget))
            as u64;
        let after = held(s, (k + 1) * model.n_x(), rollout.video_budget)
            + held(s, (k + 1) * model.n_a(), rollout.action_budget);
        let video_pass = 2 * n_x * (before + n_x) * d;
        let action_pass = 2 * n_a * (before + n_x + n_a) * d;
        let per_layer = rollout.video_steps as u64 * video_pass
            + video_pass
            + rollout.action_steps as u64 * action_pass
            + video_pass
            + action_pass;
        steps.push(StepProfile {
            step: k,
            cached_before: before as usize,
            tags: after,
            cached_floats: after as u64 * 2 * layers * d,
            attention_flops: layers * per_layer,
        });
    }
    let peak = steps.iter().map(|p| p.cached_floats).max().unwrap_or(0);
    Ok(ProfileReport {
        strategy: s,
        horizon,
        peak_cache_bytes: peak * 8,
        total_attention_flops: steps.iter().map(|p| p.attention_flops).sum(),
        steps,
    })
}
