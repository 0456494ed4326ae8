//! Sequence layout and attention masks for full-clip teacher forcing.
//!
//! Layout chunks are 0-based. Layout chunk `j` holds the clean and noisy copies
//! of the chunk being predicted at decision step `j`, and is conditioned on
//! guidance step `j` and ego step `j`. The layout carries `K + 1` guidance and
//! ego steps so the final, unused step is addressable.

use std::ops::Range;

use crate::error::{Result, WamError};
use crate::tensor::BoolMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    CleanVideo,
    CleanAction,
    NoisyVideo,
    NoisyAction,
}

impl Role {
    pub const ORDER: [Role; 4] = [Role::CleanVideo, Role::CleanAction, Role::NoisyVideo, Role::NoisyAction];

    pub fn is_clean(self) -> bool {
        matches!(self, Role::CleanVideo | Role::CleanAction)
    }

    pub fn is_video(self) -> bool {
        matches!(self, Role::CleanVideo | Role::NoisyVideo)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub chunks: usize,
    pub n_x: usize,
    pub n_a: usize,
    pub guidance_len: usize,
    pub ego_len: usize,
}

/// Position of a sequence token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSlot {
    pub chunk: usize,
    pub role: Role,
    pub offset: usize,
}

impl SequenceLayout {
    pub fn new(chunks: usize, n_x: usize, n_a: usize, guidance_len: usize, ego_len: usize) -> Result<Self> {
        if chunks == 0 || n_x == 0 || n_a == 0 || guidance_len == 0 || ego_len == 0 {
            return Err(WamError::InvalidArgument(format!(
                "layout counts must be positive: K={chunks}, N_x={n_x}, N_a={n_a}, guidance={guidance_len}, ego={ego_len}"
            )));
        }
        Ok(Self {
            chunks,
            n_x,
            n_a,
            guidance_len,
            ego_len,
        })
    }

    pub fn chunk_len(&self) -> usize {
        2 * (self.n_x + self.n_a)
    }

    pub fn len(&self) -> usize {
        self.chunks * self.chunk_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn role_len(&self, role: Role) -> usize {
        if role.is_video() {
            self.n_x
        } else {
            self.n_a
        }
    }

    pub fn span(&self, chunk: usize, role: Role) -> Range<usize> {
        let mut start = chunk * self.chunk_len();
        for r in Role::ORDER {
            if r == role {
                break;
            }
            start += self.role_len(r);
        }
        start..start + self.role_len(role)
    }

    /// Both clean spans of chunk `j` form one contiguous range.
    pub fn clean_span(&self, chunk: usize) -> Range<usize> {
        let s = chunk * self.chunk_len();
        s..s + self.n_x + self.n_a
    }

    pub fn locate(&self, idx: usize) -> Option<TokenSlot> {
        if idx >= self.len() {
            return None;
        }
        let chunk = idx / self.chunk_len();
        let mut off = idx % self.chunk_len();
        for role in Role::ORDER {
            let n = self.role_len(role);
            if off < n {
                return Some(TokenSlot {
                    chunk,
                    role,
                    offset: off,
                });
            }
            off -= n;
        }
        unreachable!("offset within chunk")
    }

    pub fn steps(&self) -> usize {
        self.chunks + 1
    }

    pub fn guidance_span(&self, step: usize) -> Range<usize> {
        step * self.guidance_len..(step + 1) * self.guidance_len
    }

    pub fn ego_span(&self, step: usize) -> Range<usize> {
        step * self.ego_len..(step + 1) * self.ego_len
    }

    pub fn guidance_cols(&self) -> usize {
        self.steps() * self.guidance_len
    }

    pub fn ego_cols(&self) -> usize {
        self.steps() * self.ego_len
    }
}

/// Teacher-forcing rule for a (query, key) pair of sequence tokens.
///
/// Every role sees all clean tokens of earlier chunks. Within its own chunk:
/// clean video sees itself; clean action sees clean video and itself; noisy
/// video sees only itself; noisy action sees clean video and itself. Clean
/// action deliberately sees nothing a noisy query could reach, so no path
/// carries the action target into a noisy action row.
pub fn self_attention_allowed(q: TokenSlot, k: TokenSlot) -> bool {
    if k.chunk < q.chunk {
        return k.role.is_clean();
    }
    if k.chunk > q.chunk {
        return false;
    }
    match q.role {
        Role::CleanVideo => k.role == Role::CleanVideo,
        Role::CleanAction => matches!(k.role, Role::CleanVideo | Role::CleanAction),
        Role::NoisyVideo => k.role == Role::NoisyVideo,
        Role::NoisyAction => matches!(k.role, Role::CleanVideo | Role::NoisyAction),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Sequence,
    Guidance,
    Ego,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub allowed: BoolMatrix,
    pub row_domain: Domain,
    pub col_domain: Domain,
}

impl AttentionMask {
    pub fn rows(&self) -> usize {
        self.allowed.rows
    }

    pub fn cols(&self) -> usize {
        self.allowed.cols
    }
}

pub fn build_teacher_forcing_mask(layout: &SequenceLayout) -> AttentionMask {
    let n = layout.len();
    let mut m = BoolMatrix::new(n, n);
    for q in 0..n {
        let qs = layout.locate(q).expect("in range");
        for j in 0..=qs.chunk {
            for role in Role::ORDER {
                let probe = TokenSlot {
                    chunk: j,
                    role,
                    offset: 0,
                };
                if self_attention_allowed(qs, probe) {
                    m.set_range(q, layout.span(j, role), true);
                }
            }
        }
    }
    AttentionMask {
        allowed: m,
        row_domain: Domain::Sequence,
        col_domain: Domain::Sequence,
    }
}

fn block_diagonal(layout: &SequenceLayout, step_len: usize, domain: Domain) -> AttentionMask {
    let n = layout.len();
    let mut m = BoolMatrix::new(n, layout.steps() * step_len);
    for q in 0..n {
        let j = q / layout.chunk_len();
        m.set_range(q, j * step_len..(j + 1) * step_len, true);
    }
    AttentionMask {
        allowed: m,
        row_domain: Domain::Sequence,
        col_domain: domain,
    }
}

/// Every token of layout chunk `j` attends exactly to guidance step `j`.
pub fn build_guidance_mask(layout: &SequenceLayout) -> AttentionMask {
    block_diagonal(layout, layout.guidance_len, Domain::Guidance)
}

/// Same block pattern over ego-state tokens.
pub fn build_ego_mask(layout: &SequenceLayout) -> AttentionMask {
    block_diagonal(layout, layout.ego_len, Domain::Ego)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub col: usize,
    pub row_chunk: usize,
    /// Chunk of the key token, or the guidance/ego step for cross masks.
    pub col_group: usize,
    /// True when the mask allows a pair the rules forbid; false when it blocks a required pair.
    pub leaks: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exhaustive check of a mask against the rules for its domain.
pub fn assert_causal(mask: &AttentionMask, layout: &SequenceLayout) -> Result<AuditReport> {
    let n = layout.len();
    let (expect_cols, step_len) = match mask.col_domain {
        Domain::Sequence => (n, 0),
        Domain::Guidance => (layout.guidance_cols(), layout.guidance_len),
        Domain::Ego => (layout.ego_cols(), layout.ego_len),
    };
    if mask.row_domain != Domain::Sequence || mask.rows() != n || mask.cols() != expect_cols {
        return Err(WamError::shape(
            "assert_causal",
            format!("mask {}x{} vs layout {}x{}", mask.rows(), mask.cols(), n, expect_cols),
        ));
    }
    let mut violations = Vec::new();
    for r in 0..n {
        let q = layout.locate(r).expect("in range");
        for c in 0..expect_cols {
            let (want, group) = match mask.col_domain {
                Domain::Sequence => {
                    let k = layout.locate(c).expect("in range");
                    (self_attention_allowed(q, k), k.chunk)
                }
                _ => {
                    let step = c / step_len;
                    (step == q.chunk, step)
                }
            };
            let have = mask.allowed.get(r, c);
            if have != want {
                violations.push(Violation {
                    row: r,
                    col: c,
                    row_chunk: q.chunk,
                    col_group: group,
                    leaks: have,
                });
            }
        }
    }
    Ok(AuditReport { violations })
}

/// Binary PGM (P5), allowed entries white.
pub fn mask_to_pgm(mask: &BoolMatrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.cols, mask.rows).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}
