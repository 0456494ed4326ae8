//! Training, evaluation, checkpoints and the KV-memory benchmark.

mod bench;
mod checkpoint;
mod data;
mod eval;
mod optim;
mod train;

pub use bench::{bench_kv, reference_rows, BenchConfig, BenchReport, BenchRow, ReferenceRow};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use data::{
    check_geometry, clip_latents, load_entries, load_manifest_clips, prepare_clip, LatentStats, PreparedClip,
    Preprocessing,
};
pub use eval::{
    chunk_displacement, displacement_errors, evaluate, stand_still_metrics, Displacement, EvalOptions, MetricsReport,
    ScenarioMetrics, HORIZONS_S,
};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use train::{
    fit_preprocessing, smoothed_ends, train, train_on_clips, train_prepared, LossRecord, TrainConfig, TrainOutcome,
};
