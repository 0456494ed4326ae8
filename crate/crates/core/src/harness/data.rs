use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::guidance::{clip_guidance, GuidanceChunk, GuidanceMode};
use crate::model::ModelConfig;
use crate::sim::{load_clip, read_manifest, Clip, EgoState, Manifest, RenderConfig, RouteCommand, Scenario};
use crate::tensor::Tensor;
use crate::tokenize::{actions_to_tensor, encode_video_chunk, ActionStats, Projector};

/// Per-dimension latent standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(d_z: usize) -> Self {
        Self {
            mean: vec![0.0; d_z],
            std: vec![1.0; d_z],
        }
    }

    pub fn fit<'a>(chunks: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let (mut sum, mut sq, mut n) = (Vec::new(), Vec::new(), 0usize);
        for t in chunks {
            if sum.is_empty() {
                sum = vec![0.0; t.cols()];
                sq = vec![0.0; t.cols()];
            }
            if t.cols() != sum.len() {
                return Err(WamError::shape("LatentStats::fit", "latent widths differ"));
            }
            for r in 0..t.rows() {
                for (c, x) in t.row(r).iter().enumerate() {
                    sum[c] += x;
                    sq[c] += x * x;
                }
            }
            n += t.rows();
        }
        if n == 0 {
            return Err(WamError::InvalidArgument("no latents to fit statistics on".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| x * s + m)
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.mean[i % c], self.std[i % c]))
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// A clip turned into model inputs: per chunk latents (standardized) and
/// normalized actions, plus guidance and ego state per chunk.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub scenario: Scenario,
    pub seed: u64,
    pub has_turn: bool,
    pub latents: Vec<Tensor>,
    pub actions_norm: Vec<Tensor>,
    pub actions: Vec<Vec<[f64; 3]>>,
    pub guidance: Vec<GuidanceChunk>,
    pub ego: Vec<EgoState>,
}

impl PreparedClip {
    pub fn chunks(&self) -> usize {
        self.latents.len()
    }
}

/// Frozen preprocessing shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub projector: Projector,
    pub latent_stats: LatentStats,
    pub action_stats: ActionStats,
    pub guidance: GuidanceMode,
    pub render: RenderConfig,
}

pub fn check_geometry(clip: &Clip, cfg: &ModelConfig) -> Result<()> {
    let v = &cfg.video;
    let ok = clip.height == v.height
        && clip.width == v.width
        && clip.channels == v.channels
        && clip.frames_per_chunk() == v.frames
        && clip.steps_per_chunk() == cfg.action_steps;
    if !ok {
        return Err(WamError::InvalidArgument(format!(
            "clip {}x{}x{} with {} frames / {} steps per chunk does not match model geometry {v:?} with {} steps",
            clip.height,
            clip.width,
            clip.channels,
            clip.frames_per_chunk(),
            clip.steps_per_chunk(),
            cfg.action_steps
        )));
    }
    if clip.chunks < 2 {
        return Err(WamError::InvalidArgument(format!(
            "clip has {} chunks; at least 2 are needed",
            clip.chunks
        )));
    }
    Ok(())
}

/// Raw (unstandardized) latents of every chunk.
pub fn clip_latents(clip: &Clip, cfg: &ModelConfig, projector: &Projector) -> Result<Vec<Tensor>> {
    (0..clip.chunks)
        .map(|k| Ok(encode_video_chunk(&clip.chunk_frames(k), &cfg.video, projector, k)?.tokens))
        .collect()
}

pub fn prepare_clip(clip: &Clip, cfg: &ModelConfig, pre: &Preprocessing) -> Result<PreparedClip> {
    check_geometry(clip, cfg)?;
    let latents = clip_latents(clip, cfg, &pre.projector)?
        .iter()
        .map(|t| pre.latent_stats.normalize(t))
        .collect();
    let actions: Vec<Vec<[f64; 3]>> = (0..clip.chunks).map(|k| clip.chunk_actions(k).to_vec()).collect();
    let actions_norm = actions
        .iter()
        .map(|a| actions_to_tensor(&pre.action_stats.normalize(a)))
        .collect::<Result<_>>()?;
    Ok(PreparedClip {
        scenario: clip.scenario,
        seed: clip.seed,
        has_turn: clip.route_commands.iter().any(|c| *c != RouteCommand::Straight),
        latents,
        actions_norm,
        actions,
        guidance: clip_guidance(clip, pre.guidance, &pre.render, cfg.guidance_len)?,
        ego: clip.ego_states.clone(),
    })
}

fn resolve(manifest_path: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(entry)
    }
}

/// Load the clips listed in a manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest_clips(path: &Path) -> Result<(Manifest, Vec<Clip>)> {
    let manifest = read_manifest(path)?;
    let clips = load_entries(path, &manifest)?;
    Ok((manifest, clips))
}

pub fn load_entries(manifest_path: &Path, manifest: &Manifest) -> Result<Vec<Clip>> {
    manifest
        .clips
        .iter()
        .map(|e| {
            let p = resolve(manifest_path, &e.path);
            let clip = load_clip(&p)?;
            if clip.seed != e.seed || clip.scenario != e.scenario || clip.chunks != e.chunks {
                return Err(WamError::MalformedClip {
                    path: p,
                    reason: "header disagrees with the manifest entry".into(),
                });
            }
            Ok(clip)
        })
        .collect()
}
