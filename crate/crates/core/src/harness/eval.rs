use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::rollout::{rollout_chunk, Observation, RolloutConfig, RolloutState};
use crate::sim::{compose_actions, Clip, Pose, ACTION_HZ};

use super::checkpoint::Checkpoint;
use super::data::prepare_clip;

/// Metric horizons in seconds.
pub const HORIZONS_S: [f64; 2] = [3.0, 4.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub ade_3s: f64,
    pub ade_4s: f64,
    pub fde_3s: f64,
    pub fde_4s: f64,
}

impl Displacement {
    fn add(&mut self, o: &Displacement, w: f64) {
        self.ade_3s += w * o.ade_3s;
        self.ade_4s += w * o.ade_4s;
        self.fde_3s += w * o.fde_3s;
        self.fde_4s += w * o.fde_4s;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub clips: usize,
    #[serde(flatten)]
    pub metrics: Displacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clips: usize,
    #[serde(flatten)]
    pub metrics: Displacement,
    pub per_scenario: BTreeMap<String, ScenarioMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub rollout: RolloutConfig,
    /// Feed generated chunks back instead of real observations.
    pub dream: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            dream: false,
            seed: 0,
        }
    }
}

/// ADE and FDE between two pose sequences starting at the same origin, over
/// the first `steps` increments (poses `1..=steps`).
pub fn displacement_errors(pred: &[Pose], truth: &[Pose], steps: usize) -> Result<(f64, f64)> {
    if steps == 0 || pred.len() <= steps || truth.len() <= steps {
        return Err(WamError::InvalidArgument(format!(
            "need {} poses, have {} predicted and {} true",
            steps + 1,
            pred.len(),
            truth.len()
        )));
    }
    let d: Vec<f64> = (1..=steps).map(|i| pred[i].distance(&truth[i])).collect();
    Ok((d.iter().sum::<f64>() / steps as f64, d[steps - 1]))
}

/// Metrics of one predicted chunk against the true increments, both integrated from the origin.
pub fn chunk_displacement(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<Displacement> {
    let p = compose_actions(Pose::default(), pred);
    let t = compose_actions(Pose::default(), truth);
    let at = |h: f64| displacement_errors(&p, &t, (h * ACTION_HZ) as usize);
    let (ade_3s, fde_3s) = at(HORIZONS_S[0])?;
    let (ade_4s, fde_4s) = at(HORIZONS_S[1])?;
    Ok(Displacement {
        ade_3s,
        ade_4s,
        fde_3s,
        fde_4s,
    })
}

fn check_horizon(clips: &[Clip]) -> Result<()> {
    let need = HORIZONS_S[1];
    for c in clips {
        if (c.chunk_seconds as f64) < need {
            return Err(WamError::HorizonOverflow {
                requested_s: need,
                available_s: c.chunk_seconds as f64,
            });
        }
    }
    Ok(())
}

fn aggregate(per_clip: Vec<(String, Displacement)>) -> MetricsReport {
    let n = per_clip.len();
    let mut total = Displacement::default();
    let mut groups: BTreeMap<String, Vec<Displacement>> = BTreeMap::new();
    for (name, d) in per_clip {
        total.add(&d, 1.0 / n.max(1) as f64);
        groups.entry(name).or_default().push(d);
    }
    let per_scenario = groups
        .into_iter()
        .map(|(name, ds)| {
            let mut m = Displacement::default();
            ds.iter().for_each(|d| m.add(d, 1.0 / ds.len() as f64));
            (
                name,
                ScenarioMetrics {
                    clips: ds.len(),
                    metrics: m,
                },
            )
        })
        .collect();
    MetricsReport {
        clips: n,
        metrics: total,
        per_scenario,
    }
}

/// Roll out every decision step of every clip (real observations appended
/// between chunks unless dreaming) and average per-clip displacement errors.
pub fn evaluate(ck: &Checkpoint, clips: &[Clip], opts: &EvalOptions) -> Result<MetricsReport> {
    check_horizon(clips)?;
    let cfg = &ck.params.config;
    let mut per_clip = Vec::with_capacity(clips.len());
    for (ci, clip) in clips.iter().enumerate() {
        let p = prepare_clip(clip, cfg, &ck.pre)?;
        let seed = opts.seed.wrapping_add(ci as u64);
        let mut state = RolloutState::new(cfg, opts.rollout, seed)?;
        let mut acc = Displacement::default();
        let steps = p.chunks() - 1;
        for k in 0..steps {
            let obs = if opts.dream {
                Observation::Dream
            } else {
                Observation::Real {
                    latents: &p.latents[k + 1],
                    actions_norm: &p.actions_norm[k + 1],
                }
            };
            let (pred, _) = rollout_chunk(&ck.params, &ck.pre.action_stats, &mut state, &p.ego[k], &p.guidance[k], obs)?;
            acc.add(&chunk_displacement(&pred.actions, &p.actions[k + 1])?, 1.0 / steps as f64);
        }
        per_clip.push((clip.scenario.name().to_string(), acc));
    }
    Ok(aggregate(per_clip))
}

/// Stand-still baseline: every predicted increment is zero.
pub fn stand_still_metrics(clips: &[Clip]) -> Result<MetricsReport> {
    check_horizon(clips)?;
    let mut per_clip = Vec::with_capacity(clips.len());
    for clip in clips {
        let steps = clip.chunks - 1;
        let mut acc = Displacement::default();
        for k in 0..steps {
            let truth = clip.chunk_actions(k + 1);
            acc.add(&chunk_displacement(&vec![[0.0; 3]; truth.len()], truth)?, 1.0 / steps as f64);
        }
        per_clip.push((clip.scenario.name().to_string(), acc));
    }
    Ok(aggregate(per_clip))
}
