//! Top-down rasterization: lane lines, agent occupancy, ego marker.

use serde::{Deserialize, Serialize};

use super::Pose;

pub const LANE_CHANNEL: usize = 0;
pub const AGENT_CHANNEL: usize = 1;
pub const EGO_CHANNEL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub meters_per_cell: f64,
    /// Raster cell (row, col) where the view pose sits; the view heading points to row 0.
    pub anchor_row: f64,
    pub anchor_col: f64,
    /// Gaussian width of agent and ego blobs, in cells.
    pub blob_sigma: f64,
    /// Half width of rendered lane lines, in cells.
    pub line_half_width: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            meters_per_cell: 2.5,
            anchor_row: 26.0,
            anchor_col: 16.0,
            blob_sigma: 0.7,
            line_half_width: 0.6,
        }
    }
}

impl RenderConfig {
    pub const CHANNELS: usize = 3;

    pub fn frame_len(&self) -> usize {
        self.height * self.width * Self::CHANNELS
    }

    /// Continuous raster coordinates (row, col) of a world point seen from `view`.
    pub fn to_cell(&self, view: &Pose, x: f64, y: f64) -> (f64, f64) {
        let (fwd, left) = view.to_local(x, y);
        (
            self.anchor_row - fwd / self.meters_per_cell,
            self.anchor_col - left / self.meters_per_cell,
        )
    }

    /// World point at the center of cell (row, col).
    pub fn cell_center(&self, view: &Pose, row: usize, col: usize) -> (f64, f64) {
        let fwd = (self.anchor_row - row as f64) * self.meters_per_cell;
        let left = (self.anchor_col - col as f64) * self.meters_per_cell;
        view.to_world(fwd, left)
    }
}

/// Road geometry: a centerline polyline plus lateral offsets of painted lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub centerline: Vec<(f64, f64)>,
    /// Left-positive lateral offsets (meters) of each drawn line.
    pub line_offsets: Vec<f64>,
}

impl Road {
    /// Signed lateral offset (left positive) of a point from the centerline,
    /// measured at its closest segment.
    pub fn lateral(&self, x: f64, y: f64) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for w in self.centerline.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            if len2 == 0.0 {
                continue;
            }
            let t = (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (x0 + t * dx, y0 + t * dy);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            if best.is_none_or(|(b, _)| d2 < b) {
                let cross = dx * (y - y0) - dy * (x - x0);
                let lat = d2.sqrt() * cross.signum();
                best = Some((d2, lat));
            }
        }
        best.map(|(_, lat)| lat)
    }

    /// Segments with at least one endpoint within `radius` of (x, y).
    pub fn near(&self, x: f64, y: f64, radius: f64) -> Road {
        let r2 = radius * radius;
        let pts = &self.centerline;
        let mut keep = vec![false; pts.len()];
        for i in 0..pts.len().saturating_sub(1) {
            let close = |p: (f64, f64)| (p.0 - x).powi(2) + (p.1 - y).powi(2) <= r2;
            if close(pts[i]) || close(pts[i + 1]) {
                keep[i] = true;
                keep[i + 1] = true;
            }
        }
        // roads never revisit the view after leaving it, so the kept points stay contiguous
        let centerline = pts
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(p, _)| *p)
            .collect();
        Road {
            centerline,
            line_offsets: self.line_offsets.clone(),
        }
    }
}

/// Everything visible in one frame.
#[derive(Debug, Clone)]
pub struct WorldState<'a> {
    pub view: Pose,
    pub ego: Option<Pose>,
    pub agents: Vec<(f64, f64)>,
    pub road: Option<&'a Road>,
}

/// Rasterize into `[H, W, C]` row-major values in [0, 1].
pub fn render_frame(world: &WorldState<'_>, cfg: &RenderConfig) -> Vec<f64> {
    let (h, w, c) = (cfg.height, cfg.width, RenderConfig::CHANNELS);
    let mut out = vec![0.0; h * w * c];

    if let Some(road) = world.road {
        let radius = (h.max(w) as f64) * cfg.meters_per_cell * 1.5;
        let local = road.near(world.view.x, world.view.y, radius);
        if local.centerline.len() >= 2 {
            let half = cfg.line_half_width * cfg.meters_per_cell;
            for r in 0..h {
                for col in 0..w {
                    let (x, y) = cfg.cell_center(&world.view, r, col);
                    if let Some(lat) = local.lateral(x, y) {
                        let v = local
                            .line_offsets
                            .iter()
                            .map(|off| (1.0 - (lat - off).abs() / half).max(0.0))
                            .fold(0.0, f64::max);
                        out[(r * w + col) * c + LANE_CHANNEL] = v;
                    }
                }
            }
        }
    }

    let mut splat = |px: f64, py: f64, channel: usize| {
        let (pr, pc) = cfg.to_cell(&world.view, px, py);
        let s2 = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
        let reach = (cfg.blob_sigma * 4.0).ceil() as i64;
        let (r0, c0) = (pr.round() as i64, pc.round() as i64);
        for r in (r0 - reach)..=(r0 + reach) {
            for col in (c0 - reach)..=(c0 + reach) {
                if r < 0 || col < 0 || r >= h as i64 || col >= w as i64 {
                    continue;
                }
                let d2 = (r as f64 - pr).powi(2) + (col as f64 - pc).powi(2);
                let idx = (r as usize * w + col as usize) * c + channel;
                out[idx] = (out[idx] + (-d2 / s2).exp()).min(1.0);
            }
        }
    };
    for &(ax, ay) in &world.agents {
        splat(ax, ay, AGENT_CHANNEL);
    }
    if let Some(ego) = world.ego {
        splat(ego.x, ego.y, EGO_CHANNEL);
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}
