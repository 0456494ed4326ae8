//! Clip-to-token mapping: frozen patch projection for video, grouped MLP
//! codec for actions, and action normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::rng::{streams, RngStream};
use crate::tensor::{Graph, Tensor, Var};

/// Raster geometry of one video chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl VideoGeometry {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn tokens(&self) -> usize {
        self.frames * (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn chunk_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    fn check(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(WamError::shape(
                "video geometry",
                format!("{}x{} raster is not divisible by patch {}", self.height, self.width, self.patch),
            ));
        }
        Ok(())
    }
}

/// Frozen linear map from flattened patches to `d_z` latents; rows are orthonormal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub d_z: usize,
    pub patch_dim: usize,
    /// Row-major `[d_z, patch_dim]`.
    pub weights: Vec<f64>,
}

impl Projector {
    pub fn identity(patch_dim: usize) -> Self {
        let mut weights = vec![0.0; patch_dim * patch_dim];
        for i in 0..patch_dim {
            weights[i * patch_dim + i] = 1.0;
        }
        Self {
            d_z: patch_dim,
            patch_dim,
            weights,
        }
    }

    /// Gaussian rows orthonormalized by two passes of modified Gram-Schmidt.
    pub fn random(d_z: usize, patch_dim: usize, seed: u64) -> Result<Self> {
        if d_z == 0 || d_z > patch_dim {
            return Err(WamError::InvalidArgument(format!(
                "projector needs 0 < d_z <= patch_dim, got d_z={d_z}, patch_dim={patch_dim}"
            )));
        }
        let mut rng = RngStream::new(seed, streams::PROJECTOR);
        let mut w = rng.normals(d_z * patch_dim);
        for i in 0..d_z {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = (0..patch_dim).map(|c| w[i * patch_dim + c] * w[j * patch_dim + c]).sum();
                    for c in 0..patch_dim {
                        w[i * patch_dim + c] -= dot * w[j * patch_dim + c];
                    }
                }
            }
            let norm = w[i * patch_dim..(i + 1) * patch_dim].iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut w[i * patch_dim..(i + 1) * patch_dim] {
                *x /= norm;
            }
        }
        Ok(Self {
            d_z,
            patch_dim,
            weights: w,
        })
    }

    /// Largest deviation of `P P^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.patch_dim;
        let mut worst: f64 = 0.0;
        for i in 0..self.d_z {
            for j in 0..self.d_z {
                let dot: f64 = (0..p).map(|c| self.weights[i * p + c] * self.weights[j * p + c]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Video latents of one chunk, `[N_x, d_z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentChunk {
    pub tokens: Tensor,
    pub chunk_index: usize,
}

/// Tokens are ordered frame, patch row, patch column; each patch flattens as (row, col, channel).
fn patchify(frames: &[f64], geo: &VideoGeometry) -> Vec<f64> {
    let (p, c) = (geo.patch, geo.channels);
    let (ph, pw) = (geo.height / p, geo.width / p);
    let frame_len = geo.height * geo.width * c;
    let mut out = Vec::with_capacity(frames.len());
    for f in 0..geo.frames {
        let base = f * frame_len;
        for pr in 0..ph {
            for pc in 0..pw {
                for r in 0..p {
                    let start = base + ((pr * p + r) * geo.width + pc * p) * c;
                    out.extend_from_slice(&frames[start..start + p * c]);
                }
            }
        }
    }
    out
}

fn unpatchify(patches: &[f64], geo: &VideoGeometry) -> Vec<f64> {
    let (p, c) = (geo.patch, geo.channels);
    let (ph, pw) = (geo.height / p, geo.width / p);
    let frame_len = geo.height * geo.width * c;
    let mut out = vec![0.0; geo.chunk_len()];
    let mut src = patches.chunks(p * c);
    for f in 0..geo.frames {
        let base = f * frame_len;
        for pr in 0..ph {
            for pc in 0..pw {
                for r in 0..p {
                    let start = base + ((pr * p + r) * geo.width + pc * p) * c;
                    out[start..start + p * c].copy_from_slice(src.next().expect("patch count"));
                }
            }
        }
    }
    out
}

pub fn encode_video_chunk(
    frames: &[f64],
    geo: &VideoGeometry,
    projector: &Projector,
    chunk_index: usize,
) -> Result<LatentChunk> {
    geo.check()?;
    if frames.len() != geo.chunk_len() {
        return Err(WamError::shape(
            "encode_video_chunk",
            format!("expected {} values, got {}", geo.chunk_len(), frames.len()),
        ));
    }
    if projector.patch_dim != geo.patch_dim() {
        return Err(WamError::shape(
            "encode_video_chunk",
            format!("projector patch_dim {} vs geometry {}", projector.patch_dim, geo.patch_dim()),
        ));
    }
    let patches = patchify(frames, geo);
    let n = geo.tokens();
    let mut z = vec![0.0; n * projector.d_z];
    // z = patches · P^T
    crate::tensor::gemm(
        n,
        projector.patch_dim,
        projector.d_z,
        &patches,
        false,
        &projector.weights,
        true,
        &mut z,
        0.0,
    );
    Ok(LatentChunk {
        tokens: Tensor::matrix(n, projector.d_z, z)?,
        chunk_index,
    })
}

/// Transpose projection and patch reassembly; clamped to [0, 1] for display.
pub fn decode_video_chunk(latents: &Tensor, geo: &VideoGeometry, projector: &Projector) -> Result<Vec<f64>> {
    geo.check()?;
    if latents.rows() != geo.tokens() || latents.cols() != projector.d_z || projector.patch_dim != geo.patch_dim() {
        return Err(WamError::shape(
            "decode_video_chunk",
            format!(
                "latents {:?} vs {} tokens of d_z {}",
                latents.shape(),
                geo.tokens(),
                projector.d_z
            ),
        ));
    }
    let n = geo.tokens();
    let mut patches = vec![0.0; n * projector.patch_dim];
    crate::tensor::gemm(
        n,
        projector.d_z,
        projector.patch_dim,
        latents.data(),
        false,
        &projector.weights,
        false,
        &mut patches,
        0.0,
    );
    let mut frames = unpatchify(&patches, geo);
    for v in &mut frames {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(frames)
}

/// Per-dimension action statistics of a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ActionStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Floor for degenerate dimensions (e.g. a straight-only split has zero yaw spread).
const MIN_STD: f64 = 1e-8;

impl ActionStats {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a [f64; 3]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let all: Vec<&[f64; 3]> = actions.into_iter().collect();
        for a in &all {
            for d in 0..3 {
                sum[d] += a[d];
            }
            n += 1;
        }
        if n == 0 {
            return Err(WamError::InvalidArgument("no actions to compute statistics from".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        for a in &all {
            for d in 0..3 {
                sq[d] += (a[d] - mean[d]).powi(2);
            }
        }
        let std = [0, 1, 2].map(|d| (sq[d] / n as f64).sqrt().max(MIN_STD));
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(WamError::InvalidArgument(format!("invalid action stats {self:?}")));
        }
        Ok(())
    }

    pub fn normalize(&self, a: &[[f64; 3]]) -> Vec<[f64; 3]> {
        a.iter()
            .map(|x| [0, 1, 2].map(|d| (x[d] - self.mean[d]) / self.std[d]))
            .collect()
    }

    pub fn denormalize(&self, a: &[[f64; 3]]) -> Vec<[f64; 3]> {
        a.iter()
            .map(|x| [0, 1, 2].map(|d| x[d] * self.std[d] + self.mean[d]))
            .collect()
    }
}

pub fn actions_to_tensor(a: &[[f64; 3]]) -> Result<Tensor> {
    Tensor::matrix(a.len(), 3, a.iter().flatten().copied().collect())
}

pub fn tensor_to_actions(t: &Tensor) -> Result<Vec<[f64; 3]>> {
    if t.cols() != 3 {
        return Err(WamError::shape("tensor_to_actions", format!("{:?} is not [n,3]", t.shape())));
    }
    Ok(t.data().chunks(3).map(|r| [r[0], r[1], r[2]]).collect())
}

/// Two-layer MLP `silu(x W1 + b1) W2 + b2` as graph handles.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Mlp {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(x, self.w1, self.b1)?;
        let h = g.silu(h);
        g.linear(h, self.w2, self.b2)
    }
}

/// E_a: group consecutive steps of `[steps, 3]` normalized actions and embed each group.
pub fn encode_actions(g: &mut Graph, a_norm: Var, ea: &Mlp, group_size: usize) -> Result<Var> {
    let t = g.value(a_norm);
    let steps = t.rows();
    if t.cols() != 3 || group_size == 0 || steps % group_size != 0 {
        return Err(WamError::shape(
            "encode_actions",
            format!("{:?} actions do not split into groups of {group_size}", t.shape()),
        ));
    }
    let grouped = g.reshape(a_norm, vec![steps / group_size, group_size * 3])?;
    ea.apply(g, grouped)
}

/// D_a: map `[N_a, d]` head states to `[N_a * group_size, 3]` velocities in temporal order.
pub fn decode_action_velocity(g: &mut Graph, head_states: Var, da: &Mlp, group_size: usize) -> Result<Var> {
    let out = da.apply(g, head_states)?;
    let t = g.value(out);
    if t.cols() != group_size * 3 {
        return Err(WamError::shape(
            "decode_action_velocity",
            format!("decoder emits {} values per token, expected {}", t.cols(), group_size * 3),
        ));
    }
    let n = t.rows();
    g.reshape(out, vec![n * group_size, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn geo() -> VideoGeometry {
        VideoGeometry {
            frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
        }
    }

    fn random_frames(n: usize, seed: u64) -> Vec<f64> {
        RngStream::new(seed, 99).uniforms(n)
    }

    #[test]
    fn token_count_and_identity_roundtrip() {
        let g = geo();
        let frames = random_frames(g.chunk_len(), 1);
        let id = Projector::identity(g.patch_dim());
        let z = encode_video_chunk(&frames, &g, &id, 0).unwrap();
        assert_eq!(z.tokens.shape(), &[64, 192]);
        let back = decode_video_chunk(&z.tokens, &g, &id).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn orthonormal_projector_contracts() {
        let g = geo();
        let p = Projector::random(48, g.patch_dim(), 7).unwrap();
        assert!(p.orthonormality_error() < 1e-12);
        let frames = random_frames(g.chunk_len(), 2);
        let z = encode_video_chunk(&frames, &g, &p, 0).unwrap();
        let patches = patchify(&frames, &g);
        for (t, patch) in patches.chunks(g.patch_dim()).enumerate() {
            let zn: f64 = z.tokens.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
            let pn: f64 = patch.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(zn <= pn + 1e-12);
        }
        assert_eq!(Projector::random(48, g.patch_dim(), 7).unwrap(), p);
    }

    #[test]
    fn decode_shapes_and_zero() {
        let g = geo();
        let p = Projector::random(48, g.patch_dim(), 3).unwrap();
        let zero = decode_video_chunk(&Tensor::zeros(&[64, 48]), &g, &p).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let lat = Tensor::matrix(64, 48, RngStream::new(1, 1).normals(64 * 48)).unwrap();
        let out = decode_video_chunk(&lat, &g, &p).unwrap();
        assert_eq!(out.len(), g.chunk_len());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn geometry_errors() {
        let mut g = geo();
        g.patch = 5;
        let p = Projector::identity(75);
        assert!(encode_video_chunk(&vec![0.0; g.chunk_len()], &g, &p, 0).is_err());
        let g = geo();
        let p = Projector::identity(g.patch_dim());
        assert!(encode_video_chunk(&[0.0; 10], &g, &p, 0).is_err());
    }

    #[test]
    fn action_stats_normalize() {
        let mut rng = RngStream::new(5, 5);
        let acts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.range(0.0, 1.2), rng.normal() * 0.01, rng.normal() * 0.05])
            .collect();
        let s = ActionStats::from_actions(&acts).unwrap();
        let n = s.normalize(&acts);
        for d in 0..3 {
            let m = n.iter().map(|x| x[d]).sum::<f64>() / n.len() as f64;
            let v = n.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / n.len() as f64;
            assert!(m.abs() < 1e-6 && (v.sqrt() - 1.0).abs() < 1e-6);
        }
        let back = s.denormalize(&n);
        for (a, b) in acts.iter().zip(&back) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
        assert_eq!(s.normalize(&[s.mean]), vec![[0.0; 3]]);
    }

    fn mlp_tensors(seed: u64, din: usize, h: usize, dout: usize) -> Vec<Tensor> {
        let mut r = RngStream::new(seed, 11);
        vec![
            Tensor::matrix(din, h, r.normals(din * h).iter().map(|x| x * 0.3).collect()).unwrap(),
            Tensor::matrix(1, h, r.normals(h)).unwrap(),
            Tensor::matrix(h, dout, r.normals(h * dout).iter().map(|x| x * 0.3).collect()).unwrap(),
            Tensor::matrix(1, dout, r.normals(dout)).unwrap(),
        ]
    }

    #[test]
    fn action_codec_shapes_and_bias() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(40, 3, RngStream::new(1, 2).normals(120)).unwrap());
        let mut ts = mlp_tensors(1, 12, 16, 8);
        ts[2] = Tensor::zeros(&[16, 8]);
        let v: Vec<Var> = ts.into_iter().map(|t| g.constant(t)).collect();
        let ea = Mlp { w1: v[0], b1: v[1], w2: v[2], b2: v[3] };
        let u = encode_actions(&mut g, a, &ea, 4).unwrap();
        assert_eq!(g.value(u).shape(), &[10, 8]);
        let b = g.value(v[3]).data().to_vec();
        for r in 0..10 {
            assert_eq!(g.value(u).row(r), &b[..]);
        }
        assert!(encode_actions(&mut g, a, &ea, 3).is_err());

        let h = g.constant(Tensor::matrix(10, 8, RngStream::new(1, 3).normals(80)).unwrap());
        let dv: Vec<Var> = mlp_tensors(2, 8, 16, 12).into_iter().map(|t| g.constant(t)).collect();
        let da = Mlp { w1: dv[0], b1: dv[1], w2: dv[2], b2: dv[3] };
        let out = decode_action_velocity(&mut g, h, &da, 4).unwrap();
        assert_eq!(g.value(out).shape(), &[40, 3]);
    }

    #[test]
    fn grouping_is_local() {
        let mut base = RngStream::new(4, 4).normals(120);
        let ts = mlp_tensors(3, 12, 16, 8);
        let run = |data: &[f64]| {
            let mut g = Graph::new();
            let a = g.constant(Tensor::matrix(40, 3, data.to_vec()).unwrap());
            let v: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let ea = Mlp { w1: v[0], b1: v[1], w2: v[2], b2: v[3] };
            let u = encode_actions(&mut g, a, &ea, 4).unwrap();
            g.value(u).clone()
        };
        let before = run(&base);
        // swap step 1 (group 0) with step 9 (group 2)
        for d in 0..3 {
            base.swap(3 + d, 27 + d);
        }
        let after = run(&base);
        for r in 0..10 {
            let changed = before.row(r) != after.row(r);
            assert_eq!(changed, r == 0 || r == 2, "row {r}");
        }
    }

    #[test]
    fn codec_gradcheck() {
        let a = Tensor::matrix(8, 3, RngStream::new(8, 8).normals(24)).unwrap();
        let mut params = vec![a];
        params.extend(mlp_tensors(5, 12, 6, 5));
        params.extend(mlp_tensors(6, 5, 7, 12));
        let report = gradcheck(
            |g, v| {
                let ea = Mlp { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                let da = Mlp { w1: v[5], b1: v[6], w2: v[7], b2: v[8] };
                let u = encode_actions(g, v[0], &ea, 4)?;
                let out = decode_action_velocity(g, u, &da, 4)?;
                Ok(g.mean_square(out))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }
}
