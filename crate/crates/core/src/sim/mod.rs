//! Synthetic driving world: unicycle ego, scripted traffic, top-down frames.

mod io;
mod render;

pub use io::{load_clip, read_manifest, save_clip, write_manifest, Manifest, ManifestEntry, CLIP_MAGIC, CLIP_VERSION};
pub use render::{render_frame, RenderConfig, Road, WorldState, AGENT_CHANNEL, EGO_CHANNEL, LANE_CHANNEL};

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::rng::{streams, RngStream};

pub const FRAME_HZ: f64 = 1.0;
pub const ACTION_HZ: f64 = 10.0;
pub const ACTION_DT: f64 = 1.0 / ACTION_HZ;
/// Below this speed curvature is reported as zero.
pub const MIN_CURVATURE_SPEED: f64 = 0.1;
pub const ROUTE_THRESHOLD_DEG: f64 = 15.0;
pub const ROUTE_TOLERANCE_DEG: f64 = 1e-9;

const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// (forward, left) coordinates of a world point in this pose's frame.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn to_world(&self, fwd: f64, left: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * fwd - s * left, self.y + s * fwd + c * left)
    }

    /// Apply an ego-frame increment `(dx, dy, dyaw)`.
    pub fn compose(&self, inc: [f64; 3]) -> Pose {
        let (x, y) = self.to_world(inc[0], inc[1]);
        Pose::new(x, y, self.yaw + inc[2])
    }

    /// Ego-frame increment that carries `self` to `next`.
    pub fn increment_to(&self, next: &Pose) -> [f64; 3] {
        let (dx, dy) = self.to_local(next.x, next.y);
        [dx, dy, wrap_angle(next.yaw - self.yaw)]
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wrap into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Integrate ego-frame increments from `start`; returns `increments.len() + 1` poses.
pub fn compose_actions(start: Pose, increments: &[[f64; 3]]) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(increments.len() + 1);
    poses.push(start);
    let mut p = start;
    for inc in increments {
        p = p.compose(*inc);
        poses.push(p);
    }
    poses
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Straight,
    LeftTurn,
    RightTurn,
    FollowLead,
    StopAtObstacle,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Straight,
        Scenario::LeftTurn,
        Scenario::RightTurn,
        Scenario::FollowLead,
        Scenario::StopAtObstacle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Straight => "straight",
            Scenario::LeftTurn => "left_turn",
            Scenario::RightTurn => "right_turn",
            Scenario::FollowLead => "follow_lead",
            Scenario::StopAtObstacle => "stop_at_obstacle",
        }
    }

    pub fn code(self) -> u32 {
        Self::ALL.iter().position(|s| *s == self).unwrap() as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_turn(self) -> bool {
        matches!(self, Scenario::LeftTurn | Scenario::RightTurn)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = WamError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|x| x.name() == s)
            .copied()
            .ok_or_else(|| WamError::InvalidArgument(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteCommand {
    Straight,
    Left,
    Right,
}

impl RouteCommand {
    pub fn code(self) -> u8 {
        match self {
            RouteCommand::Straight => 0,
            RouteCommand::Left => 1,
            RouteCommand::Right => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RouteCommand::Straight),
            1 => Some(RouteCommand::Left),
            2 => Some(RouteCommand::Right),
            _ => None,
        }
    }
}

/// Left above +15 deg of wrapped relative yaw, right below -15 deg, else straight.
/// A change within rounding of the threshold counts as straight.
pub fn classify_route(yaw_start: f64, yaw_end: f64) -> RouteCommand {
    let delta = wrap_angle(yaw_end - yaw_start).to_degrees();
    let edge = ROUTE_THRESHOLD_DEG + ROUTE_TOLERANCE_DEG;
    if delta > edge {
        RouteCommand::Left
    } else if delta < -edge {
        RouteCommand::Right
    } else {
        RouteCommand::Straight
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub velocity: f64,
    pub acceleration: f64,
    pub curvature: f64,
}

impl EgoState {
    pub fn to_array(self) -> [f64; 3] {
        [self.velocity, self.acceleration, self.curvature]
    }
}

/// Kinematic ego state at pose index `n` of a 10 Hz path. Central differences
/// when both neighbours exist, one-sided otherwise.
pub fn ego_state_from_poses(poses: &[Pose], n: usize) -> Result<EgoState> {
    if poses.len() < 2 || n >= poses.len() {
        return Err(WamError::OutOfRange {
            index: n,
            len: poses.len(),
        });
    }
    let (prev, next) = if n == 0 {
        (0, 1)
    } else if n + 1 < poses.len() {
        (n - 1, n + 1)
    } else {
        (n - 1, n)
    };
    let span = (next - prev) as f64 * ACTION_DT;
    let (before, after) = if n == 0 {
        (None, Some(poses[0].distance(&poses[1]) / ACTION_DT))
    } else if n + 1 < poses.len() {
        (
            Some(poses[n - 1].distance(&poses[n]) / ACTION_DT),
            Some(poses[n].distance(&poses[n + 1]) / ACTION_DT),
        )
    } else {
        (Some(poses[n - 1].distance(&poses[n]) / ACTION_DT), None)
    };
    let velocity = match (before, after) {
        (Some(b), Some(a)) => 0.5 * (a + b),
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => 0.0,
    };
    let acceleration = match (before, after) {
        (Some(b), Some(a)) => (a - b) / ACTION_DT,
        _ if poses.len() >= 3 && n + 1 == poses.len() => {
            let b2 = poses[n - 2].distance(&poses[n - 1]) / ACTION_DT;
            (velocity - b2) / ACTION_DT
        }
        _ => 0.0,
    };
    let yaw_rate = wrap_angle(poses[next].yaw - poses[prev].yaw) / span;
    let curvature = if velocity < MIN_CURVATURE_SPEED {
        0.0
    } else {
        yaw_rate / velocity
    };
    Ok(EgoState {
        velocity,
        acceleration,
        curvature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub render: RenderConfig,
    pub chunk_seconds: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            chunk_seconds: 4,
        }
    }
}

impl SimConfig {
    pub fn frames_per_chunk(&self) -> usize {
        (self.chunk_seconds as f64 * FRAME_HZ) as usize
    }

    pub fn steps_per_chunk(&self) -> usize {
        (self.chunk_seconds as f64 * ACTION_HZ) as usize
    }
}

/// One synthetic driving clip of `chunks` consecutive chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub scenario: Scenario,
    pub seed: u64,
    pub chunk_seconds: u32,
    pub chunks: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `F x H x W x C` quantized intensities; value = byte / 255.
    pub frames: Vec<u8>,
    /// 10 Hz ego-frame increments `(dx, dy, dyaw)`.
    pub actions: Vec<[f64; 3]>,
    /// Ego state at the end frame of each chunk.
    pub ego_states: Vec<EgoState>,
    /// Route command of each chunk, from its yaw change.
    pub route_commands: Vec<RouteCommand>,
}

impl Clip {
    pub fn frames_per_chunk(&self) -> usize {
        (self.chunk_seconds as f64 * FRAME_HZ) as usize
    }

    pub fn steps_per_chunk(&self) -> usize {
        (self.chunk_seconds as f64 * ACTION_HZ) as usize
    }

    pub fn frame_count(&self) -> usize {
        self.chunks * self.frames_per_chunk()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, f: usize) -> Vec<f64> {
        let n = self.frame_len();
        self.frames[f * n..(f + 1) * n].iter().map(|&b| b as f64 / 255.0).collect()
    }

    /// Frames of chunk `k`, concatenated.
    pub fn chunk_frames(&self, k: usize) -> Vec<f64> {
        let n = self.frame_len() * self.frames_per_chunk();
        self.frames[k * n..(k + 1) * n].iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn chunk_actions(&self, k: usize) -> &[[f64; 3]] {
        let s = self.steps_per_chunk();
        &self.actions[k * s..(k + 1) * s]
    }

    /// Absolute 10 Hz pose path starting at the origin.
    pub fn poses(&self) -> Vec<Pose> {
        compose_actions(Pose::default(), &self.actions)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.chunks == 0 {
            return Err("zero chunks".into());
        }
        if self.frames.len() != self.frame_count() * self.frame_len() {
            return Err("frame buffer length".into());
        }
        if self.actions.len() != self.chunks * self.steps_per_chunk() {
            return Err("action count".into());
        }
        if self.actions.len() != 10 * self.frame_count() {
            return Err("actions must be 10x frames".into());
        }
        if self.ego_states.len() != self.chunks || self.route_commands.len() != self.chunks {
            return Err("per-chunk arrays".into());
        }
        if self.actions.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite action".into());
        }
        if self.ego_states.iter().any(|e| e.velocity < 0.0 || !e.curvature.is_finite()) {
            return Err("invalid ego state".into());
        }
        Ok(())
    }
}

pub fn ego_state_at(clip: &Clip, k: usize) -> Result<EgoState> {
    clip.ego_states.get(k).copied().ok_or(WamError::OutOfRange {
        index: k,
        len: clip.chunks,
    })
}

/// Road polyline with an arc-length table.
struct RoadBuilder {
    points: Vec<(f64, f64)>,
    arc: Vec<f64>,
}

impl RoadBuilder {
    /// Straight run-up behind the path, the path itself, then a straight run-out.
    fn from_path(path: &[Pose], spacing: f64) -> Self {
        let first = path[0];
        let last = *path.last().unwrap();
        let mut points = Vec::new();
        let back = 150.0;
        let mut s = -back;
        while s < 0.0 {
            points.push(first.to_world(s, 0.0));
            s += spacing;
        }
        let mut since = spacing;
        for w in path.windows(2) {
            since += w[0].distance(&w[1]);
            if since >= spacing {
                points.push((w[1].x, w[1].y));
                since = 0.0;
            }
        }
        let mut s = spacing;
        while s <= 250.0 {
            points.push(last.to_world(s, 0.0));
            s += spacing;
        }
        let mut arc = vec![-back];
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            arc.push(arc.last().unwrap() + d);
        }
        Self { points, arc }
    }

    /// World point at arc length `s` and lateral offset `lat` (left positive).
    fn point_at(&self, s: f64, lat: f64) -> (f64, f64) {
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let len = self.arc[i + 1] - self.arc[i];
        let t = if len > 0.0 { (s - self.arc[i]) / len } else { 0.0 };
        let yaw = (p1.1 - p0.1).atan2(p1.0 - p0.0);
        let base = Pose::new(p0.0 + t * (p1.0 - p0.0), p0.1 + t * (p1.1 - p0.1), yaw);
        base.to_world(0.0, lat)
    }
}

struct Oncoming {
    s0: f64,
    speed: f64,
}

/// Intelligent-driver acceleration toward a leader `gap` meters ahead.
fn idm_accel(v: f64, v_lead: f64, gap: f64, v_desired: f64) -> f64 {
    let (a_max, b, headway, s0): (f64, f64, f64, f64) = (2.0, 3.0, 1.2, 4.0);
    let s_star = s0 + v * headway + v * (v - v_lead) / (2.0 * (a_max * b).sqrt());
    let a = a_max * (1.0 - (v / v_desired).powi(4) - (s_star.max(0.0) / gap.max(0.5)).powi(2));
    a.clamp(-6.0, 2.0)
}

/// Generate a clip. Pure in `(seed, scenario, chunks, config)`.
pub fn generate_clip(seed: u64, scenario: Scenario, chunks: usize, cfg: &SimConfig) -> Result<Clip> {
    if chunks == 0 {
        return Err(WamError::InvalidArgument("a clip needs at least one chunk".into()));
    }
    let mut rng = RngStream::new(seed, streams::DATA);
    let steps_per_chunk = cfg.steps_per_chunk();
    let total_steps = chunks * steps_per_chunk;
    let horizon = total_steps as f64 * ACTION_DT;
    let dt = ACTION_DT;

    // ego simulation runs one step past the clip so the last ego state is a central difference
    let sim_steps = total_steps + 1;
    let mut poses = Vec::with_capacity(sim_steps + 1);
    let mut pose = Pose::default();
    poses.push(pose);

    // leader along the ego lane: (arc position, speed); the lead scenarios drive straight
    let mut leader: Option<(f64, f64)> = None;
    let mut leader_schedule: Vec<(f64, f64)> = Vec::new();
    let mut v;
    match scenario {
        Scenario::Straight => {
            v = rng.range(6.0, 12.0);
            let mut t = 0.0;
            while t < horizon + 1.0 {
                leader_schedule.push((t, rng.range(-0.5, 0.5)));
                t += rng.range(2.0, 5.0);
            }
            let sched = leader_schedule.clone();
            for i in 0..sim_steps {
                let t = i as f64 * dt;
                let a = sched.iter().rev().find(|(t0, _)| *t0 <= t).map(|p| p.1).unwrap_or(0.0);
                let a = if (v <= 4.0 && a < 0.0) || (v >= 12.0 && a > 0.0) { 0.0 } else { a };
                v = (v + a * dt).max(0.0);
                pose = Pose::new(pose.x + v * pose.yaw.cos() * dt, pose.y + v * pose.yaw.sin() * dt, pose.yaw);
                poses.push(pose);
            }
            leader_schedule.clear();
        }
        Scenario::LeftTurn | Scenario::RightTurn => {
            let sign = if scenario == Scenario::LeftTurn { 1.0 } else { -1.0 };
            let v_cruise = rng.range(7.0, 11.0);
            let v_turn = rng.range(4.0, 7.0);
            let radius = rng.range(10.0, 20.0);
            let t_start = rng.range(0.2, 0.6) * horizon;
            let brake = 1.5;
            let brake_start = (t_start - (v_cruise - v_turn) / brake).max(0.0);
            v = if brake_start > 0.0 { v_cruise } else { v_turn.max(v_cruise - brake * t_start) };
            let mut turned = 0.0;
            for i in 0..sim_steps {
                let t = i as f64 * dt;
                let turning = t >= t_start && turned < FRAC_PI_2;
                let a = if turning {
                    0.0
                } else if t < t_start && t >= brake_start {
                    -brake
                } else if turned >= FRAC_PI_2 && v < v_cruise {
                    1.0
                } else {
                    0.0
                };
                v = (v + a * dt).max(if t < t_start { v_turn } else { 0.0 });
                let mut omega = 0.0;
                if turning {
                    omega = v / radius;
                    let remaining = FRAC_PI_2 - turned;
                    if omega * dt > remaining {
                        omega = remaining / dt;
                    }
                    turned += omega * dt;
                }
                pose = Pose::new(
                    pose.x + v * pose.yaw.cos() * dt,
                    pose.y + v * pose.yaw.sin() * dt,
                    pose.yaw + sign * omega * dt,
                );
                poses.push(pose);
            }
        }
        Scenario::FollowLead | Scenario::StopAtObstacle => {
            let stop = scenario == Scenario::StopAtObstacle;
            let (mut s_lead, mut v_lead) = if stop {
                (rng.range(25.0, 70.0), 0.0)
            } else {
                (rng.range(15.0, 30.0), rng.range(5.0, 11.0))
            };
            v = if stop { rng.range(6.0, 12.0) } else { (v_lead + rng.range(-1.0, 1.0)).max(0.0) };
            if !stop {
                let mut t = 0.0;
                while t < horizon + 1.0 {
                    leader_schedule.push((t, rng.range(-2.5, 1.5)));
                    t += rng.range(2.0, 4.0);
                }
            }
            let mut s_ego = 0.0;
            let v_desired = 13.0;
            leader = Some((s_lead, v_lead));
            let mut lead_track = Vec::with_capacity(sim_steps + 1);
            lead_track.push(s_lead);
            for i in 0..sim_steps {
                let t = i as f64 * dt;
                if !stop {
                    let a_lead = leader_schedule.iter().rev().find(|(t0, _)| *t0 <= t).map(|p| p.1).unwrap_or(0.0);
                    v_lead = (v_lead + a_lead * dt).clamp(0.0, 13.0);
                    s_lead += v_lead * dt;
                }
                let gap = s_lead - s_ego - 4.5;
                let a = idm_accel(v, v_lead, gap, v_desired);
                v = (v + a * dt).max(0.0);
                s_ego += v * dt;
                pose = Pose::new(pose.x + v * dt, 0.0, 0.0);
                poses.push(pose);
                lead_track.push(s_lead);
            }
            leader_schedule = lead_track.into_iter().enumerate().map(|(i, s)| (i as f64 * dt, s)).collect();
        }
    }

    let n_oncoming = match scenario {
        Scenario::FollowLead | Scenario::StopAtObstacle => rng.categorical(&[1.0, 1.0, 1.0])?,
        _ => rng.categorical(&[1.0, 1.0, 1.0])?,
    };
    let oncoming: Vec<Oncoming> = (0..n_oncoming)
        .map(|_| Oncoming {
            s0: rng.range(20.0, 140.0),
            speed: rng.range(5.0, 12.0),
        })
        .collect();

    let path = &poses[..=total_steps];
    let road_geo = RoadBuilder::from_path(&poses, 2.5);
    let road = Road {
        centerline: road_geo.points.clone(),
        line_offsets: vec![-LANE_WIDTH / 2.0, LANE_WIDTH / 2.0, 1.5 * LANE_WIDTH],
    };

    let frames_per_chunk = cfg.frames_per_chunk();
    let steps_per_frame = (ACTION_HZ / FRAME_HZ) as usize;
    let rcfg = &cfg.render;
    let mut frames = Vec::with_capacity(chunks * frames_per_chunk * rcfg.frame_len());
    for k in 0..chunks {
        let view = path[k * steps_per_chunk];
        for f in 1..=frames_per_chunk {
            let step = k * steps_per_chunk + f * steps_per_frame;
            let t = step as f64 * dt;
            let mut agents = Vec::new();
            if leader.is_some() {
                let s_lead = leader_schedule[step].1;
                agents.push(road_geo.point_at(s_lead, 0.0));
            }
            for o in &oncoming {
                agents.push(road_geo.point_at(o.s0 - o.speed * t, LANE_WIDTH));
            }
            let world = WorldState {
                view,
                ego: Some(path[step]),
                agents,
                road: Some(&road),
            };
            frames.extend(
                render_frame(&world, rcfg)
                    .into_iter()
                    .map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
            );
        }
    }

    let actions: Vec<[f64; 3]> = path.windows(2).map(|w| w[0].increment_to(&w[1])).collect();
    let mut ego_states = Vec::with_capacity(chunks);
    let mut route_commands = Vec::with_capacity(chunks);
    for k in 0..chunks {
        let end = (k + 1) * steps_per_chunk;
        ego_states.push(ego_state_from_poses(&poses, end)?);
        route_commands.push(classify_route(path[k * steps_per_chunk].yaw, path[end].yaw));
    }

    let clip = Clip {
        scenario,
        seed,
        chunk_seconds: cfg.chunk_seconds,
        chunks,
        height: rcfg.height,
        width: rcfg.width,
        channels: RenderConfig::CHANNELS,
        frames,
        actions,
        ego_states,
        route_commands,
    };
    debug_assert!(clip.validate().is_ok());
    Ok(clip)
}

/// Per-clip seed for index `i` of a generated set.
pub fn clip_seed(base_seed: u64, index: usize) -> u64 {
    let mut r = RngStream::fork(base_seed, streams::DATA, index as u64);
    let (a, b) = (r.uniform(), r.uniform());
    ((a * (1u64 << 32) as f64) as u64) << 32 | (b * (1u64 << 32) as f64) as u64
}

/// Deterministic clip set: scenarios cycle in order, seeds derive from `base_seed`.
/// Sets generated with the same base seed are nested prefixes of each other.
pub fn generate_set(
    base_seed: u64,
    scenarios: &[Scenario],
    count: usize,
    chunks: usize,
    cfg: &SimConfig,
) -> Result<Vec<Clip>> {
    if scenarios.is_empty() {
        return Err(WamError::InvalidArgument("no scenarios selected".into()));
    }
    (0..count)
        .map(|i| generate_clip(clip_seed(base_seed, i), scenarios[i % scenarios.len()], chunks, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_thresholds() {
        assert_eq!(classify_route(0.0, 20f64.to_radians()), RouteCommand::Left);
        assert_eq!(classify_route(0.0, (-20f64).to_radians()), RouteCommand::Right);
        assert_eq!(classify_route(0.0, 0.0), RouteCommand::Straight);
        assert_eq!(classify_route(0.0, 15f64.to_radians()), RouteCommand::Straight);
        // wrap across the branch cut
        assert_eq!(classify_route(PI - 0.1, -PI + 0.3), RouteCommand::Left);
        assert_eq!(classify_route(1.0 + 2.0 * PI, 1.0 + 0.5 + 2.0 * PI), RouteCommand::Left);
    }

    #[test]
    fn ego_state_of_simple_paths() {
        let still = vec![Pose::default(); 5];
        assert_eq!(ego_state_from_poses(&still, 2).unwrap(), EgoState::default());

        let v = 7.0;
        let line: Vec<Pose> = (0..10).map(|i| Pose::new(v * i as f64 * ACTION_DT, 0.0, 0.0)).collect();
        let e = ego_state_from_poses(&line, 5).unwrap();
        assert!((e.velocity - v).abs() < 1e-9 && e.acceleration.abs() < 1e-9 && e.curvature == 0.0);

        let (r, v) = (25.0, 8.0);
        let w = v / r;
        let circle: Vec<Pose> = (0..40)
            .map(|i| {
                let th = w * i as f64 * ACTION_DT;
                Pose::new(r * th.sin(), r * (1.0 - th.cos()), th)
            })
            .collect();
        let e = ego_state_from_poses(&circle, 20).unwrap();
        assert!((e.curvature - 1.0 / r).abs() / (1.0 / r) < 0.02, "{e:?}");
        assert!(ego_state_from_poses(&circle, 40).is_err());
    }

    #[test]
    fn straight_clip_holds_course() {
        let cfg = SimConfig::default();
        for seed in 0..5 {
            let clip = generate_clip(seed, Scenario::Straight, 3, &cfg).unwrap();
            assert!(clip.route_commands.iter().all(|c| *c == RouteCommand::Straight));
            let poses = clip.poses();
            for k in 0..3 {
                let dy = wrap_angle(poses[(k + 1) * 40].yaw - poses[k * 40].yaw);
                assert!(dy.to_degrees().abs() < 15.0);
            }
        }
    }

    #[test]
    fn turn_clips_are_tagged() {
        let cfg = SimConfig::default();
        for seed in 0..10 {
            let l = generate_clip(seed, Scenario::LeftTurn, 2, &cfg).unwrap();
            assert!(l.route_commands.contains(&RouteCommand::Left), "seed {seed}");
            let r = generate_clip(seed, Scenario::RightTurn, 2, &cfg).unwrap();
            assert!(r.route_commands.contains(&RouteCommand::Right), "seed {seed}");
        }
        let one = generate_clip(3, Scenario::LeftTurn, 1, &cfg).unwrap();
        assert_eq!(one.route_commands, vec![RouteCommand::Left]);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = SimConfig::default();
        for s in Scenario::ALL {
            let a = generate_clip(42, s, 2, &cfg).unwrap();
            let b = generate_clip(42, s, 2, &cfg).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
            assert_eq!(a.actions.len(), 10 * a.frame_count());
        }
        assert!(generate_clip(1, Scenario::Straight, 0, &cfg).is_err());
    }

    #[test]
    fn obstacle_scenario_stops() {
        let cfg = SimConfig::default();
        let clip = generate_clip(5, Scenario::StopAtObstacle, 4, &cfg).unwrap();
        let last = clip.ego_states.last().unwrap();
        assert!(last.velocity < 0.5, "{last:?}");
    }
}
