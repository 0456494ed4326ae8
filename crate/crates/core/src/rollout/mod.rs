//! Chunk-by-chunk inference under a bounded KV memory.

mod euler;
mod kv;
mod profile;

pub use euler::{euler_integrate, tau_grid};
pub use kv::{
    redundancy_scores, relevance_scores, retention_scores, select_top, KvPool, Modality, RetentionReport, Strategy,
    Tag,
};
pub use profile::{profile_memory_flops, ProfileReport, StepProfile};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::guidance::GuidanceChunk;
use crate::mask::Role;
use crate::model::{action_head, forward_tokens, video_head, BoundParams, LayerKv, ModelConfig, ModelParams, TokenBlock};
use crate::rng::{streams, RngStream};
use crate::sim::EgoState;
use crate::tensor::{Graph, Spans, Tensor};
use crate::tokenize::{tensor_to_actions, ActionStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub strategy: Strategy,
    pub video_budget: usize,
    pub action_budget: usize,
    pub lambda: f64,
    pub video_steps: usize,
    /// Video integration stops here; the partially denoised latent conditions the actions.
    pub video_tau_end: f64,
    pub action_steps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Selective,
            video_budget: 128,
            action_budget: 32,
            lambda: 0.07,
            video_steps: 3,
            video_tau_end: 0.6,
            action_steps: 10,
        }
    }
}

/// Pools and noise stream of one rollout.
#[derive(Debug, Clone)]
pub struct RolloutState {
    pub video: KvPool,
    pub action: KvPool,
    pub config: RolloutConfig,
    /// Chunks committed to memory so far.
    pub chunks_done: usize,
    rng: RngStream,
}

impl RolloutState {
    pub fn new(model: &ModelConfig, config: RolloutConfig, seed: u64) -> Result<Self> {
        let pool = |m, budget| KvPool::new(m, config.strategy, budget, config.lambda, model.layers, model.d, model.heads);
        Ok(Self {
            video: pool(Modality::Video, config.video_budget)?,
            action: pool(Modality::Action, config.action_budget)?,
            config,
            chunks_done: 0,
            rng: RngStream::new(seed, streams::ROLLOUT),
        })
    }

    /// Per-layer cache as seen by attention: video pool rows then action pool rows.
    pub fn cache(&self) -> Vec<LayerKv> {
        if self.video.is_empty() && self.action.is_empty() {
            return Vec::new();
        }
        (0..self.video.layers())
            .map(|l| LayerKv {
                k: Tensor::concat_rows(&[&self.video.layer_keys(l), &self.action.layer_keys(l)]).expect("same width"),
                v: Tensor::concat_rows(&[&self.video.layer_values(l), &self.action.layer_values(l)])
                    .expect("same width"),
            })
            .collect()
    }

    pub fn cached_tokens(&self) -> usize {
        self.video.len() + self.action.len()
    }
}

/// What gets appended to memory once a chunk is predicted.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    /// The real next chunk: latents `[N_x, d_z]` and normalized actions `[steps, 3]`.
    Real { latents: &'a Tensor, actions_norm: &'a Tensor },
    /// Append the model's own prediction.
    Dream,
}

#[derive(Debug, Clone)]
pub struct ChunkPrediction {
    pub latents: Tensor,
    pub actions_norm: Tensor,
    pub actions: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub chunk: usize,
    pub video: RetentionReport,
    pub action: RetentionReport,
}

fn prefix_spans(rows: &[(usize, usize)]) -> Result<Rc<Spans>> {
    let cols = rows.iter().map(|r| r.1).max().unwrap_or(0);
    let mut ranges = Vec::new();
    for &(count, end) in rows {
        for _ in 0..count {
            ranges.push(vec![(0, end)]);
        }
    }
    Ok(Rc::new(Spans::from_ranges(cols, ranges)?))
}

fn extend_cache(cache: &[LayerKv], extra: &[LayerKv]) -> Result<Vec<LayerKv>> {
    if cache.is_empty() {
        return Ok(extra.to_vec());
    }
    cache
        .iter()
        .zip(extra)
        .map(|(c, e)| {
            Ok(LayerKv {
                k: Tensor::concat_rows(&[&c.k, &e.k])?,
                v: Tensor::concat_rows(&[&c.v, &e.v])?,
            })
        })
        .collect()
}

fn split_rows(kv: &[LayerKv], start: usize, len: usize) -> Result<Vec<LayerKv>> {
    kv.iter()
        .map(|x| {
            Ok(LayerKv {
                k: x.k.slice_rows(start, len)?,
                v: x.v.slice_rows(start, len)?,
            })
        })
        .collect()
}

fn tags(chunk: usize, n: usize, role: Role) -> Vec<Tag> {
    (0..n).map(|token| Tag { chunk, token, role }).collect()
}

/// Predict the next chunk from memory, then commit `obs` (or the prediction) to memory.
pub fn rollout_chunk(
    params: &ModelParams,
    stats: &ActionStats,
    state: &mut RolloutState,
    ego: &EgoState,
    guidance: &GuidanceChunk,
    obs: Observation,
) -> Result<(ChunkPrediction, StepReport)> {
    let cfg = &params.config;
    if state.video.layers() != cfg.layers {
        return Err(WamError::PoolInconsistent(format!(
            "pools built for {} layers, model has {}",
            state.video.layers(),
            cfg.layers
        )));
    }
    state.video.check()?;
    state.action.check()?;
    let e = ego.to_array();
    if e.iter().any(|x| !x.is_finite()) {
        return Err(WamError::NonFinite(format!("ego state {e:?}")));
    }
    let rc = state.config;
    let (n_x, n_a, steps) = (cfg.n_x(), cfg.n_a(), cfg.action_steps);
    let guidance = std::slice::from_ref(guidance);
    let ego = std::slice::from_ref(ego);
    let cache = state.cache();
    let c = state.cached_tokens();
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, false);

    let video_rows: Rc<[usize]> = (0..n_x).collect();
    let video_spans = prefix_spans(&[(n_x, c + n_x)])?;
    let mut video_queries = Vec::new();
    let noise = Tensor::matrix(n_x, cfg.d_z, state.rng.normals(n_x * cfg.d_z))?;
    let latents = euler_integrate(
        |x, tau, i| {
            let last = i + 1 == rc.video_steps;
            let block = TokenBlock {
                role: Role::NoisyVideo,
                data: x,
                tau,
                step: 0,
            };
            let pass = forward_tokens(&mut g, &bp, &[block], video_spans.clone(), &cache, guidance, ego, None, last)?;
            if last {
                video_queries = pass.queries;
            }
            let v = video_head(&mut g, &bp, pass.hidden, video_rows.clone())?;
            Ok(g.value(v).clone())
        },
        noise,
        1.0,
        rc.video_tau_end,
        rc.video_steps,
    )?;

    // the generated latent enters as clean-video context for the action flow
    let zhat = TokenBlock {
        role: Role::CleanVideo,
        data: &latents,
        tau: 0.0,
        step: 0,
    };
    let zhat_pass = forward_tokens(&mut g, &bp, &[zhat], video_spans.clone(), &cache, guidance, ego, None, true)?;
    let action_cache = extend_cache(&cache, &zhat_pass.kv)?;
    let action_spans = prefix_spans(&[(n_a, c + n_x + n_a)])?;
    let action_rows: Rc<[usize]> = (0..n_a).collect();
    let mut action_queries = Vec::new();
    let noise = Tensor::matrix(steps, 3, state.rng.normals(steps * 3))?;
    let actions_norm = euler_integrate(
        |x, tau, i| {
            let last = i + 1 == rc.action_steps;
            let block = TokenBlock {
                role: Role::NoisyAction,
                data: x,
                tau,
                step: 0,
            };
            let pass =
                forward_tokens(&mut g, &bp, &[block], action_spans.clone(), &action_cache, guidance, ego, None, last)?;
            if last {
                action_queries = pass.queries;
            }
            let v = action_head(&mut g, &bp, pass.hidden, action_rows.clone())?;
            Ok(g.value(v).clone())
        },
        noise,
        1.0,
        0.0,
        rc.action_steps,
    )?;
    let actions = stats.denormalize(&tensor_to_actions(&actions_norm)?);

    let (obs_latents, obs_actions) = match obs {
        Observation::Real { latents, actions_norm } => (latents, actions_norm),
        Observation::Dream => (&latents, &actions_norm),
    };
    let blocks = [
        TokenBlock {
            role: Role::CleanVideo,
            data: obs_latents,
            tau: 0.0,
            step: 0,
        },
        TokenBlock {
            role: Role::CleanAction,
            data: obs_actions,
            tau: 0.0,
            step: 0,
        },
    ];
    let spans = prefix_spans(&[(n_x, c + n_x), (n_a, c + n_x + n_a)])?;
    let pass = forward_tokens(&mut g, &bp, &blocks, spans, &cache, guidance, ego, None, true)?;
    let chunk = state.chunks_done;
    let video_report = state.video.retention_update(
        &tags(chunk, n_x, Role::CleanVideo),
        &split_rows(&pass.kv, 0, n_x)?,
        &video_queries,
    )?;
    let action_report = state.action.retention_update(
        &tags(chunk, n_a, Role::CleanAction),
        &split_rows(&pass.kv, n_x, n_a)?,
        &action_queries,
    )?;
    state.chunks_done += 1;
    Ok((
        ChunkPrediction {
            latents,
            actions_norm,
            actions,
        },
        StepReport {
            chunk,
            video: video_report,
            action: action_report,
        },
    ))
}
