//! Small diffusion transformer shared by the video and action streams.

mod forward;
mod params;
#[cfg(test)]
pub(crate) mod tests;

pub use forward::{
    action_head, ego_features, forward, forward_tokens, video_head, BoundParams, CrossSpans, ForwardOutput, LayerKv,
    MaskSet, TokenBlock, TokenPass, TrainSequence,
};
pub use params::{init_model, LayerIndex, ModelParams, ParamIndex};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::guidance::GuidanceToken;
use crate::mask::SequenceLayout;
use crate::tokenize::VideoGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_z: usize,
    pub video: VideoGeometry,
    pub action_steps: usize,
    pub group_size: usize,
    /// Longest training layout in chunks.
    pub k_max: usize,
    pub guidance_len: usize,
    pub guidance_vocab: usize,
    pub mlp_ratio: usize,
    pub tau_dim: usize,
    pub action_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 4,
            heads: 4,
            d_z: 48,
            video: VideoGeometry {
                frames: 4,
                height: 32,
                width: 32,
                channels: 3,
                patch: 8,
            },
            action_steps: 40,
            group_size: 4,
            k_max: 4,
            guidance_len: 3,
            guidance_vocab: GuidanceToken::COUNT,
            mlp_ratio: 4,
            tau_dim: 32,
            action_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn n_x(&self) -> usize {
        self.video.tokens()
    }

    pub fn n_a(&self) -> usize {
        self.action_steps / self.group_size
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    pub fn layout(&self, chunks: usize) -> Result<SequenceLayout> {
        if chunks > self.k_max {
            return Err(WamError::InvalidArgument(format!(
                "layout of {chunks} chunks exceeds k_max {}",
                self.k_max
            )));
        }
        SequenceLayout::new(chunks, self.n_x(), self.n_a(), self.guidance_len, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d,
            self.layers,
            self.heads,
            self.d_z,
            self.action_steps,
            self.group_size,
            self.k_max,
            self.guidance_len,
            self.mlp_ratio,
            self.tau_dim,
            self.action_hidden,
        ];
        if positive.contains(&0) {
            return Err(WamError::InvalidArgument(format!("model config has a zero count: {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(WamError::InvalidArgument(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.action_steps % self.group_size != 0 {
            return Err(WamError::InvalidArgument(format!(
                "{} action steps do not split into groups of {}",
                self.action_steps, self.group_size
            )));
        }
        if self.tau_dim % 2 != 0 {
            return Err(WamError::InvalidArgument("tau_dim must be even".into()));
        }
        let v = &self.video;
        if v.patch == 0 || v.height % v.patch != 0 || v.width % v.patch != 0 || v.frames == 0 {
            return Err(WamError::InvalidArgument(format!("bad video geometry {v:?}")));
        }
        if self.d_z > v.patch_dim() {
            return Err(WamError::InvalidArgument(format!(
                "d_z={} exceeds patch dimension {}",
                self.d_z,
                v.patch_dim()
            )));
        }
        if self.guidance_vocab != GuidanceToken::COUNT {
            return Err(WamError::InvalidArgument(format!(
                "guidance vocabulary must have {} entries",
                GuidanceToken::COUNT
            )));
        }
        Ok(())
    }
}
