//! Binary checkpoint: `WAMK`, u32 version, u64 payload length, payload, u64 checksum.
//! The payload is a length-prefixed JSON header followed by little-endian f64 blobs
//! (projector weights, parameters, Adam first and second moments) in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, WamError};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::data::{LatentStats, Preprocessing};
use super::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WAMK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub pre: Preprocessing,
    pub optimizer: AdamW,
    pub iteration: usize,
    pub rng: Vec<RngState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    projector_d_z: usize,
    projector_patch_dim: usize,
    latent_stats: LatentStats,
    action_stats: crate::tokenize::ActionStats,
    guidance: crate::guidance::GuidanceMode,
    render: crate::sim::RenderConfig,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    iteration: usize,
    rng: Vec<RngState>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model: ck.params.config,
        names: ck.params.names.clone(),
        shapes: ck.params.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        projector_d_z: ck.pre.projector.d_z,
        projector_patch_dim: ck.pre.projector.patch_dim,
        latent_stats: ck.pre.latent_stats.clone(),
        action_stats: ck.pre.action_stats,
        guidance: ck.pre.guidance,
        render: ck.pre.render,
        optimizer: ck.optimizer.config,
        optimizer_step: ck.optimizer.step,
        iteration: ck.iteration,
        rng: ck.rng.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
    payload.extend_from_slice(&json);
    put_f64s(&mut payload, &ck.pre.projector.weights);
    for t in &ck.params.tensors {
        put_f64s(&mut payload, t.data());
    }
    for m in ck.optimizer.m.iter().chain(&ck.optimizer.v) {
        put_f64s(&mut payload, m);
    }
    let mut out = Vec::with_capacity(payload.len() + 24);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            WamError::Parse(format!(
                "checkpoint payload ends at byte {} but {n} more were expected",
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| WamError::Parse("blob size overflows".into()))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(WamError::NotACheckpoint);
    }
    if bytes.len() < 16 {
        return Err(WamError::Parse(format!("checkpoint truncated to {} bytes", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(WamError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = 16u64.saturating_add(len).saturating_add(8);
    if bytes.len() as u64 != expected {
        return Err(WamError::Parse(format!(
            "checkpoint is {} bytes, header announces {expected}",
            bytes.len()
        )));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    let computed = checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(WamError::Corrupted { stored, computed });
    }
    let mut r = Reader {
        bytes: &bytes[16..body_end],
        at: 0,
    };
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| WamError::Parse("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    if header.names.len() != header.shapes.len() {
        return Err(WamError::Parse("header names and shapes differ in count".into()));
    }
    let projector = crate::tokenize::Projector {
        d_z: header.projector_d_z,
        patch_dim: header.projector_patch_dim,
        weights: r.f64s(header.projector_d_z * header.projector_patch_dim)?,
    };
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for s in &header.shapes {
        let n = s.iter().product();
        tensors.push(Tensor::new(s.clone(), r.f64s(n)?)?);
    }
    let sizes: Vec<usize> = tensors.iter().map(Tensor::len).collect();
    let m = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
    if r.at != r.bytes.len() {
        return Err(WamError::Parse(format!("{} trailing payload bytes", r.bytes.len() - r.at)));
    }
    let params = ModelParams::from_parts(header.model, header.names, tensors)?;
    Ok(Checkpoint {
        params,
        pre: Preprocessing {
            projector,
            latent_stats: header.latent_stats,
            action_stats: header.action_stats,
            guidance: header.guidance,
            render: header.render,
        },
        optimizer: AdamW {
            config: header.optimizer,
            step: header.optimizer_step,
            m,
            v,
        },
        iteration: header.iteration,
        rng: header.rng,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| WamError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| WamError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceMode;
    use crate::model::init_model;
    use crate::rng::RngStream;
    use crate::sim::RenderConfig;
    use crate::tokenize::{ActionStats, Projector};

    pub(crate) fn small_checkpoint() -> Checkpoint {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        };
        let params = init_model(&cfg, 3).unwrap();
        let mut optimizer = AdamW::new(AdamWConfig::default(), &params);
        optimizer.step = 7;
        optimizer.m[0][0] = 0.25;
        optimizer.v[1][0] = -1.5e-300;
        Checkpoint {
            pre: Preprocessing {
                projector: Projector::random(cfg.d_z, cfg.video.patch_dim(), 1).unwrap(),
                latent_stats: LatentStats::identity(cfg.d_z),
                action_stats: ActionStats::default(),
                guidance: GuidanceMode::SceneEvolving,
                render: RenderConfig::default(),
            },
            params,
            optimizer,
            iteration: 12,
            rng: vec![RngStream::new(5, 1).state()],
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = small_checkpoint();
        let a = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
    }

    #[test]
    fn faults_are_structured() {
        let a = encode_checkpoint(&small_checkpoint()).unwrap();
        let mut flipped = a.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(WamError::Corrupted { .. })));
        assert!(matches!(decode_checkpoint(&a[..a.len() / 2]), Err(WamError::Parse(_))));
        assert!(matches!(decode_checkpoint(&a[..10]), Err(WamError::Parse(_))));
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(WamError::NotACheckpoint)));
        let mut newer = a.clone();
        newer[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&newer), Err(WamError::Version { found: 9, expected: 1 })));
    }
}
