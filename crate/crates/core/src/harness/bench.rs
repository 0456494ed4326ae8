use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::rollout::{profile_memory_flops, ProfileReport, RolloutConfig, Strategy};
use crate::sim::Clip;

use super::checkpoint::Checkpoint;
use super::eval::{evaluate, EvalOptions, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub strategies: Vec<Strategy>,
    pub video_budget: usize,
    pub action_budget: usize,
    pub lambda: f64,
    /// Chunks used for the analytic memory/FLOP profile.
    pub profile_horizon: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            video_budget: 128,
            action_budget: 32,
            lambda: 0.07,
            profile_horizon: 75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub metrics: Option<MetricsReport>,
    pub peak_cache_bytes: u64,
    pub final_cached_tokens: usize,
    pub total_attention_flops: u64,
    /// Full-strategy peak cache divided by this row's.
    pub memory_reduction: f64,
    pub flop_reduction: f64,
    pub profile: ProfileReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub strategy: Strategy,
    pub ade: f64,
    pub fde: f64,
    pub memory_gb: Option<f64>,
    pub gflops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub profile_horizon: usize,
    pub rows: Vec<BenchRow>,
    /// Published large-model figures, kept for context only.
    pub reference: Vec<ReferenceRow>,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow {
            strategy: Strategy::Full,
            ade: 0.83,
            fde: 2.47,
            memory_gb: Some(3.07),
            gflops: Some(17.37),
        },
        ReferenceRow {
            strategy: Strategy::Fifo,
            ade: 1.40,
            fde: 3.47,
            memory_gb: None,
            gflops: None,
        },
        ReferenceRow {
            strategy: Strategy::Selective,
            ade: 0.89,
            fde: 2.52,
            memory_gb: Some(0.25),
            gflops: Some(1.44),
        },
    ]
}

/// Evaluate each strategy on `clips` (when a checkpoint is given) and profile
/// its memory and attention cost at the long horizon.
pub fn bench_kv(ck: Option<&Checkpoint>, model: &crate::model::ModelConfig, clips: &[Clip], cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.strategies.is_empty() {
        return Err(WamError::InvalidArgument("no strategies to benchmark".into()));
    }
    let rollout_for = |strategy| RolloutConfig {
        strategy,
        video_budget: cfg.video_budget,
        action_budget: cfg.action_budget,
        lambda: cfg.lambda,
        ..RolloutConfig::default()
    };
    let full = profile_memory_flops(model, &rollout_for(Strategy::Full), cfg.profile_horizon)?;
    let mut rows = Vec::with_capacity(cfg.strategies.len());
    for &strategy in &cfg.strategies {
        let rc = rollout_for(strategy);
        let metrics = match ck {
            Some(ck) => Some(evaluate(
                ck,
                clips,
                &EvalOptions {
                    rollout: rc,
                    dream: false,
                    seed: cfg.seed,
                },
            )?),
            None => None,
        };
        let profile = profile_memory_flops(model, &rc, cfg.profile_horizon)?;
        rows.push(BenchRow {
            strategy,
            metrics,
            peak_cache_bytes: profile.peak_cache_bytes,
            final_cached_tokens: profile.steps.last().map_or(0, |s| s.tags),
            total_attention_flops: profile.total_attention_flops,
            memory_reduction: full.peak_cache_bytes as f64 / profile.peak_cache_bytes.max(1) as f64,
            flop_reduction: full.total_attention_flops as f64 / profile.total_attention_flops.max(1) as f64,
            profile,
        });
    }
    Ok(BenchReport {
        profile_horizon: cfg.profile_horizon,
        rows,
        reference: reference_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn analytic_rows_without_a_model() {
        let r = bench_kv(None, &ModelConfig::default(), &[], &BenchConfig::default()).unwrap();
        let sel = r.rows.iter().find(|x| x.strategy == Strategy::Selective).unwrap();
        assert!(sel.memory_reduction >= 10.0);
        assert_eq!(sel.final_cached_tokens, 160);
        assert_eq!(r.reference.len(), 3);
        let none = BenchConfig {
            strategies: vec![],
            ..BenchConfig::default()
        };
        assert!(bench_kv(None, &ModelConfig::default(), &[], &none).is_err());
    }
}
