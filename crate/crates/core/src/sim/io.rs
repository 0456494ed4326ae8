//! Binary clip files and JSON manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Clip, EgoState, RouteCommand, Scenario};
use crate::error::{Result, WamError};

pub const CLIP_MAGIC: &[u8; 4] = b"WAMC";
pub const CLIP_VERSION: u32 = 1;

pub fn save_clip(clip: &Clip, path: &Path) -> Result<()> {
    clip.validate().map_err(|reason| WamError::MalformedClip {
        path: path.to_path_buf(),
        reason,
    })?;
    let mut buf = Vec::with_capacity(64 + clip.frames.len() + clip.actions.len() * 24);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for v in [
        clip.chunks,
        clip.height,
        clip.width,
        clip.channels,
        clip.frame_count(),
        clip.actions.len(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&clip.seed.to_le_bytes());
    buf.extend_from_slice(&clip.scenario.code().to_le_bytes());
    buf.extend_from_slice(&clip.chunk_seconds.to_le_bytes());
    buf.extend_from_slice(&clip.frames);
    for a in &clip.actions {
        for v in a {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for e in &clip.ego_states {
        for v in e.to_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend(clip.route_commands.iter().map(|c| c.code()));
    fs::write(path, buf).map_err(|e| WamError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_clip(bytes: &[u8]) -> std::result::Result<Clip, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CLIP_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CLIP_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let chunks = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let frame_count = r.u32()? as usize;
    let action_count = r.u32()? as usize;
    let seed = r.u64()?;
    let scenario = Scenario::from_code(r.u32()?).ok_or("unknown scenario code")?;
    let chunk_seconds = r.u32()?;
    let frame_bytes = frame_count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(channels))
        .ok_or("frame size overflow")?;
    let frames = r.take(frame_bytes)?.to_vec();
    let mut actions = Vec::with_capacity(action_count.min(1 << 20));
    for _ in 0..action_count {
        actions.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let mut ego_states = Vec::with_capacity(chunks.min(1 << 16));
    for _ in 0..chunks {
        ego_states.push(EgoState {
            velocity: r.f64()?,
            acceleration: r.f64()?,
            curvature: r.f64()?,
        });
    }
    let route_commands = r
        .take(chunks)?
        .iter()
        .map(|&c| RouteCommand::from_code(c).ok_or_else(|| format!("bad route code {c}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    let clip = Clip {
        scenario,
        seed,
        chunk_seconds,
        chunks,
        height,
        width,
        channels,
        frames,
        actions,
        ego_states,
        route_commands,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn load_clip(path: &Path) -> Result<Clip> {
    let bytes = fs::read(path).map_err(|e| WamError::io(path, e))?;
    parse_clip(&bytes).map_err(|reason| WamError::MalformedClip {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub scenario: Scenario,
    pub seed: u64,
    pub chunks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    /// First `n` entries; nested training sets share a prefix.
    pub fn prefix(&self, n: usize) -> Manifest {
        Manifest {
            clips: self.clips.iter().take(n).cloned().collect(),
        }
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(manifest)?;
    fs::write(path, s).map_err(|e| WamError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let s = fs::read_to_string(path).map_err(|e| WamError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_clip, SimConfig};

    #[test]
    fn clip_roundtrip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(9, Scenario::LeftTurn, 2, &SimConfig::default()).unwrap();
        let p = dir.path().join("c.bin");
        save_clip(&clip, &p).unwrap();
        assert_eq!(load_clip(&p).unwrap(), clip);

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_clip(&p), Err(WamError::MalformedClip { .. })));

        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(load_clip(&p).is_err());
    }

    #[test]
    fn manifest_prefix() {
        let m = Manifest {
            clips: (0..5)
                .map(|i| ManifestEntry {
                    path: format!("clip_{i}.bin").into(),
                    scenario: Scenario::ALL[i % 5],
                    seed: i as u64,
                    chunks: 3,
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_manifest(&m, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.prefix(2).clips, m.clips[..2]);
    }
}
