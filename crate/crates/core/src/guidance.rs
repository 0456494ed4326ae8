//! Rule-based scene guidance: a fixed symbolic vocabulary produced per
//! decision step from the latest chunk, its ego motion, and the route command
//! for the upcoming horizon.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::sim::{compose_actions, Clip, Pose, RenderConfig, RouteCommand, ACTION_DT, AGENT_CHANNEL};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum GuidanceToken {
    Proceed = 0,
    Yield,
    Stop,
    TurnLeft,
    TurnRight,
    KeepLane,
    Follow,
    ClearRoad,
    ObstacleAhead,
    Pad,
}

impl GuidanceToken {
    /// Vocabulary size including PAD.
    pub const COUNT: usize = 10;
    pub const PAD_ID: u8 = GuidanceToken::Pad as u8;
}

/// Tokens produced per step before padding.
pub const GUIDANCE_SLOTS: usize = 3;
/// Agent cells brighter than this count as occupied.
pub const OCCUPIED_LEVEL: f64 = 0.5;
/// Occupied fraction of the forward corridor that flags an obstacle.
pub const OBSTACLE_FRACTION: f64 = 0.02;
/// Speed below which the ego counts as stopped (m/s).
pub const STOP_SPEED: f64 = 0.3;
const CORRIDOR_LENGTH: f64 = 35.0;
const CORRIDOR_HALF_WIDTH: f64 = 2.5;
/// Steps averaged for the recent speed.
const RECENT_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceChunk {
    pub step_index: usize,
    pub token_ids: Vec<u8>,
}

impl GuidanceChunk {
    pub fn padded(step_index: usize, tokens: &[GuidanceToken], len: usize) -> Self {
        let mut token_ids: Vec<u8> = tokens.iter().map(|t| *t as u8).collect();
        token_ids.truncate(len);
        token_ids.resize(len, GuidanceToken::PAD_ID);
        Self { step_index, token_ids }
    }

    /// Constant chunk used for the fixed-guidance baseline.
    pub fn fixed(step_index: usize, len: usize) -> Self {
        Self::padded(
            step_index,
            &[GuidanceToken::KeepLane, GuidanceToken::ClearRoad, GuidanceToken::Proceed],
            len,
        )
    }
}

/// Occupancy statistics of the last frame of a chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSummary {
    /// Occupied fraction of the lane corridor ahead of the ego.
    pub forward_occupancy: f64,
}

impl FrameSummary {
    /// `frame` is rendered in the chunk-start frame; `ego` is the ego pose at
    /// the frame time in that same frame (from the chunk's own actions).
    pub fn from_frame(frame: &[f64], ego: Pose, cfg: &RenderConfig) -> Result<Self> {
        if frame.len() != cfg.frame_len() {
            return Err(WamError::shape(
                "FrameSummary",
                format!("frame has {} values, expected {}", frame.len(), cfg.frame_len()),
            ));
        }
        let view = Pose::default();
        let (mut cells, mut occupied) = (0usize, 0usize);
        for r in 0..cfg.height {
            for c in 0..cfg.width {
                let (x, y) = cfg.cell_center(&view, r, c);
                let (fwd, left) = ego.to_local(x, y);
                if fwd > 0.0 && fwd <= CORRIDOR_LENGTH && left.abs() <= CORRIDOR_HALF_WIDTH {
                    cells += 1;
                    if frame[(r * cfg.width + c) * RenderConfig::CHANNELS + AGENT_CHANNEL] > OCCUPIED_LEVEL {
                        occupied += 1;
                    }
                }
            }
        }
        let forward_occupancy = if cells == 0 { 0.0 } else { occupied as f64 / cells as f64 };
        Ok(Self { forward_occupancy })
    }
}

fn recent_speed(actions: &[[f64; 3]]) -> f64 {
    let n = actions.len().min(RECENT_STEPS);
    if n == 0 {
        return 0.0;
    }
    let tail = &actions[actions.len() - n..];
    tail.iter().map(|a| a[0].hypot(a[1]) / ACTION_DT).sum::<f64>() / n as f64
}

/// Rule table over (scene summary, recent actions, upcoming command).
pub fn produce_guidance(
    step_index: usize,
    summary: &FrameSummary,
    recent_actions: &[[f64; 3]],
    command: RouteCommand,
    guidance_len: usize,
) -> GuidanceChunk {
    let first = match command {
        RouteCommand::Straight => GuidanceToken::KeepLane,
        RouteCommand::Left => GuidanceToken::TurnLeft,
        RouteCommand::Right => GuidanceToken::TurnRight,
    };
    let obstacle = summary.forward_occupancy > OBSTACLE_FRACTION;
    let second = if obstacle {
        GuidanceToken::ObstacleAhead
    } else {
        GuidanceToken::ClearRoad
    };
    let third = if recent_speed(recent_actions) < STOP_SPEED {
        GuidanceToken::Stop
    } else if obstacle {
        GuidanceToken::Yield
    } else {
        GuidanceToken::Proceed
    };
    GuidanceChunk::padded(step_index, &[first, second, third], guidance_len)
}

/// Guidance for decision step `k` of a clip from chunk `k`'s last frame and
/// actions (raw, not normalized) and the command for the upcoming chunk.
pub fn guidance_from_chunk(
    step_index: usize,
    last_frame: &[f64],
    chunk_actions: &[[f64; 3]],
    upcoming: RouteCommand,
    cfg: &RenderConfig,
    guidance_len: usize,
) -> Result<GuidanceChunk> {
    let ego = *compose_actions(Pose::default(), chunk_actions).last().expect("non-empty");
    let summary = FrameSummary::from_frame(last_frame, ego, cfg)?;
    Ok(produce_guidance(step_index, &summary, chunk_actions, upcoming, guidance_len))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    SceneEvolving,
    Fixed,
}

/// Command for the horizon after chunk `k`; the last chunk reuses its own.
pub fn upcoming_command(clip: &Clip, k: usize) -> RouteCommand {
    clip.route_commands
        .get(k + 1)
        .or_else(|| clip.route_commands.get(k))
        .copied()
        .unwrap_or(RouteCommand::Straight)
}

/// One guidance chunk per clip chunk.
pub fn clip_guidance(clip: &Clip, mode: GuidanceMode, cfg: &RenderConfig, guidance_len: usize) -> Result<Vec<GuidanceChunk>> {
    let fpc = clip.frames_per_chunk();
    (0..clip.chunks)
        .map(|k| match mode {
            GuidanceMode::Fixed => Ok(GuidanceChunk::fixed(k, guidance_len)),
            GuidanceMode::SceneEvolving => guidance_from_chunk(
                k,
                &clip.frame((k + 1) * fpc - 1),
                clip.chunk_actions(k),
                upcoming_command(clip, k),
                cfg,
                guidance_len,
            ),
        })
        .collect()
}

/// Guidance cache stored next to the clips, one list per manifest entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCache {
    pub guidance_len: usize,
    pub clips: Vec<Vec<GuidanceChunk>>,
}

impl GuidanceCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| WamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| WamError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Embed guidance steps in order: table lookup plus a per-slot position
/// vector. `table` is `[COUNT, d]` (PAD row is a learned null vector),
/// `positions` is `[guidance_len, d]`.
pub fn embed_guidance(g: &mut Graph, steps: &[GuidanceChunk], table: Var, positions: Var) -> Result<Var> {
    let glen = g.value(positions).rows();
    let mut ids = Vec::with_capacity(steps.len() * glen);
    for s in steps {
        if s.token_ids.len() != glen {
            return Err(WamError::shape(
                "embed_guidance",
                format!("step {} has {} tokens, expected {glen}", s.step_index, s.token_ids.len()),
            ));
        }
        for &id in &s.token_ids {
            if id as usize >= GuidanceToken::COUNT {
                return Err(WamError::InvalidArgument(format!("guidance id {id} outside the vocabulary")));
            }
            ids.push(id as usize);
        }
    }
    if ids.is_empty() {
        return Err(WamError::InvalidArgument("no guidance steps to embed".into()));
    }
    let ids: Rc<[usize]> = ids.into();
    let pos_idx: Rc<[usize]> = (0..steps.len()).flat_map(|_| 0..glen).collect();
    let tok = g.gather_rows(table, ids)?;
    let pos = g.gather_rows(positions, pos_idx)?;
    g.add(tok, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::sim::{generate_clip, Scenario, SimConfig};
    use crate::tensor::{gradcheck, Tensor};
    use GuidanceToken::*;

    fn ids(t: &[GuidanceToken]) -> Vec<u8> {
        t.iter().map(|x| *x as u8).collect()
    }

    fn moving() -> Vec<[f64; 3]> {
        vec![[0.8, 0.0, 0.0]; 40]
    }

    #[test]
    fn rule_table() {
        let clear = FrameSummary { forward_occupancy: 0.0 };
        let busy = FrameSummary { forward_occupancy: 0.1 };
        let g = produce_guidance(0, &clear, &moving(), RouteCommand::Left, 3);
        assert_eq!(g.token_ids, ids(&[TurnLeft, ClearRoad, Proceed]));
        let g = produce_guidance(0, &busy, &moving(), RouteCommand::Straight, 3);
        assert_eq!(g.token_ids, ids(&[KeepLane, ObstacleAhead, Yield]));
        for cmd in [RouteCommand::Straight, RouteCommand::Left, RouteCommand::Right] {
            let g = produce_guidance(0, &busy, &[[0.0; 3]; 40], cmd, 3);
            assert_eq!(g.token_ids[2], Stop as u8);
        }
        let g = produce_guidance(0, &clear, &moving(), RouteCommand::Right, 5);
        assert_eq!(g.token_ids, ids(&[TurnRight, ClearRoad, Proceed, Pad, Pad]));
    }

    #[test]
    fn obstacle_scenarios_flag_obstacles() {
        let cfg = SimConfig::default();
        let mut flagged = 0;
        for seed in 0..6 {
            let clip = generate_clip(seed, Scenario::StopAtObstacle, 3, &cfg).unwrap();
            let gs = clip_guidance(&clip, GuidanceMode::SceneEvolving, &cfg.render, 3).unwrap();
            if gs.iter().any(|g| g.token_ids[1] == ObstacleAhead as u8) {
                flagged += 1;
            }
            assert_eq!(gs.last().unwrap().token_ids[2], Stop as u8, "seed {seed}");
        }
        assert!(flagged >= 5, "{flagged}");
    }

    #[test]
    fn guidance_ignores_later_chunks_and_tracks_commands() {
        let cfg = SimConfig::default();
        let clip = generate_clip(4, Scenario::LeftTurn, 3, &cfg).unwrap();
        let base = clip_guidance(&clip, GuidanceMode::SceneEvolving, &cfg.render, 3).unwrap();
        // disturb everything after chunk 0 except the command schedule
        let mut other = clip.clone();
        let n0 = other.frame_len() * other.frames_per_chunk();
        for b in other.frames[n0..].iter_mut() {
            *b = 255 - *b;
        }
        let s = other.steps_per_chunk();
        for a in other.actions[s..].iter_mut() {
            a[0] += 1.0;
        }
        let g0 = clip_guidance(&other, GuidanceMode::SceneEvolving, &cfg.render, 3).unwrap();
        assert_eq!(g0[0], base[0]);
        for k in 1..base.len() {
            if upcoming_command(&clip, k) != upcoming_command(&clip, k - 1) {
                assert_ne!(base[k].token_ids, base[k - 1].token_ids);
            }
        }
        let fixed = clip_guidance(&clip, GuidanceMode::Fixed, &cfg.render, 3).unwrap();
        assert!(fixed.windows(2).all(|w| w[0].token_ids == w[1].token_ids));
    }

    #[test]
    fn embedding_shapes_and_errors() {
        let d = 6;
        let mut g = Graph::new();
        let table = g.constant(Tensor::matrix(GuidanceToken::COUNT, d, RngStream::new(1, 1).normals(60)).unwrap());
        let pos = g.constant(Tensor::matrix(3, d, RngStream::new(2, 1).normals(18)).unwrap());
        let steps = vec![GuidanceChunk::fixed(0, 3), GuidanceChunk::fixed(1, 3)];
        let e = embed_guidance(&mut g, &steps, table, pos).unwrap();
        assert_eq!(g.value(e).shape(), &[6, d]);
        assert_eq!(g.value(e).row(0), g.value(e).row(3));
        let bad = vec![GuidanceChunk {
            step_index: 0,
            token_ids: vec![0, 1, 42],
        }];
        assert!(embed_guidance(&mut g, &bad, table, pos).is_err());
    }

    #[test]
    fn embedding_gradcheck() {
        let table = Tensor::matrix(GuidanceToken::COUNT, 4, RngStream::new(3, 3).normals(40)).unwrap();
        let pos = Tensor::matrix(3, 4, RngStream::new(4, 3).normals(12)).unwrap();
        let steps = vec![
            GuidanceChunk::padded(0, &[TurnLeft, ObstacleAhead], 3),
            GuidanceChunk::fixed(1, 3),
        ];
        let w = Tensor::matrix(6, 4, RngStream::new(5, 3).normals(24)).unwrap();
        let report = gradcheck(
            |g, v| {
                let e = embed_guidance(g, &steps, v[0], v[1])?;
                let wv = g.constant(w.clone());
                let m = g.mul(e, wv)?;
                let s = g.silu(m);
                Ok(g.mean_square(s))
            },
            &[table, pos],
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GuidanceCache {
            guidance_len: 3,
            clips: vec![vec![GuidanceChunk::fixed(0, 3)]],
        };
        let p = dir.path().join("guidance.json");
        cache.save(&p).unwrap();
        assert_eq!(GuidanceCache::load(&p).unwrap(), cache);
    }
}
