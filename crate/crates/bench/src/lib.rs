//! Shared fixtures for the criterion benches.

use wam_core::harness::{fit_preprocessing, prepare_clip, PreparedClip, Preprocessing, TrainConfig};
use wam_core::model::{init_model, ModelConfig, ModelParams};
use wam_core::sim::{generate_set, Scenario, SimConfig};
use wam_core::{RngStream, Tensor};

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = RngStream::new(seed, 0);
    Tensor::matrix(rows, cols, r.normals(rows * cols)).expect("shape")
}

/// An untrained model with its preprocessing and `clips` prepared clips of `chunks` chunks.
pub struct Fixture {
    pub train: TrainConfig,
    pub params: ModelParams,
    pub pre: Preprocessing,
    pub clips: Vec<PreparedClip>,
}

pub fn fixture(model: ModelConfig, clips: usize, chunks: usize) -> Fixture {
    let train = TrainConfig {
        model,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let raw = generate_set(3, &Scenario::ALL, clips, chunks, &SimConfig::default()).expect("clips");
    let pre = fit_preprocessing(&raw, &train).expect("preprocessing");
    let prepared = raw.iter().map(|c| prepare_clip(c, &model, &pre).expect("prepare")).collect();
    Fixture {
        params: init_model(&model, 1).expect("init"),
        train,
        pre,
        clips: prepared,
    }
}
