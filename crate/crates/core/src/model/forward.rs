use std::ops::Range;
use std::rc::Rc;

use crate::error::{Result, WamError};
use crate::guidance::{embed_guidance, GuidanceChunk};
use crate::mask::{build_ego_mask, build_guidance_mask, build_teacher_forcing_mask, Role, SequenceLayout};
use crate::sim::EgoState;
use crate::tensor::{Graph, Spans, Tensor, Var};
use crate::tokenize::{decode_action_velocity, encode_actions, Mlp};

use super::ModelParams;

/// Parameters registered on a graph, either as tracked leaves or constants.
pub struct BoundParams<'a> {
    pub params: &'a ModelParams,
    pub vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(g: &mut Graph, params: &'a ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone().trainable())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { params, vars }
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn mlp(&self, idx: [usize; 4]) -> Mlp {
        Mlp {
            w1: self.v(idx[0]),
            b1: self.v(idx[1]),
            w2: self.v(idx[2]),
            b2: self.v(idx[3]),
        }
    }
}

/// Keys and values of a set of tokens at one layer, `[m, d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// A contiguous run of tokens sharing a role, noise level and conditioning step.
#[derive(Debug, Clone, Copy)]
pub struct TokenBlock<'a> {
    pub role: Role,
    /// Latents `[N_x, d_z]` for video roles, normalized actions `[steps, 3]` for action roles.
    pub data: &'a Tensor,
    pub tau: f64,
    /// Guidance and ego step this block is conditioned on.
    pub step: usize,
}

pub struct TokenPass {
    /// Final normalized hidden states, `[n, d]`.
    pub hidden: Var,
    pub block_rows: Vec<Range<usize>>,
    /// Per-layer keys/values of the passed tokens (when captured).
    pub kv: Vec<LayerKv>,
    /// Per-layer self-attention queries of the passed tokens (when captured).
    pub queries: Vec<Tensor>,
}

/// Ego state scaled to roughly unit range.
pub fn ego_features(e: &EgoState) -> [f64; 3] {
    [e.velocity / 10.0, e.acceleration / 3.0, e.curvature * 10.0]
}

fn tau_features(taus: &[f64], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(taus.len() * dim);
    for &t in taus {
        let args: Vec<f64> = (0..half)
            .map(|i| t * 1000.0 * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::matrix(taus.len(), dim, data)
}

fn block_diagonal_spans(blocks: &[TokenBlock], rows: &[Range<usize>], width: usize, cols: usize) -> Result<Spans> {
    let mut ranges = Vec::new();
    for (b, r) in blocks.iter().zip(rows) {
        for _ in r.clone() {
            ranges.push(vec![(b.step * width, (b.step + 1) * width)]);
        }
    }
    Spans::from_ranges(cols, ranges)
}

fn modulated_norm(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x);
    let s = g.add_scalar(scale, 1.0);
    let m = g.mul(n, s)?;
    g.add(m, shift)
}

/// Cross-attention spans for a token pass; `None` derives them from block steps.
pub struct CrossSpans {
    pub guidance: Rc<Spans>,
    pub ego: Rc<Spans>,
}

/// Run the transformer over `blocks`, with optional per-layer cached keys and
/// values prepended to the self-attention keys. `self_spans` rows index the
/// passed tokens; its columns index `cache ++ tokens`.
#[allow(clippy::too_many_arguments)]
pub fn forward_tokens(
    g: &mut Graph,
    bp: &BoundParams,
    blocks: &[TokenBlock],
    self_spans: Rc<Spans>,
    cache: &[LayerKv],
    guidance: &[GuidanceChunk],
    ego: &[EgoState],
    cross: Option<CrossSpans>,
    capture: bool,
) -> Result<TokenPass> {
    let cfg = &bp.params.config;
    let idx = &bp.params.index;
    let (n_x, steps) = (cfg.n_x(), cfg.action_steps);
    if blocks.is_empty() {
        return Err(WamError::InvalidArgument("no tokens to process".into()));
    }
    if !cache.is_empty() && cache.len() != cfg.layers {
        return Err(WamError::PoolInconsistent(format!(
            "cache has {} layers, model has {}",
            cache.len(),
            cfg.layers
        )));
    }
    let cache_len = cache.first().map_or(0, |c| c.k.rows());
    if cache.iter().any(|c| c.k.rows() != cache_len || c.v.rows() != cache_len) {
        return Err(WamError::PoolInconsistent("layers hold different token counts".into()));
    }

    // embeddings: all video blocks through the latent projection, all action blocks through E_a
    let mut video_data = Vec::new();
    let mut action_data = Vec::new();
    for b in blocks {
        let t = b.data;
        let ok = if b.role.is_video() {
            video_data.push(t);
            t.shape() == [n_x, cfg.d_z]
        } else {
            action_data.push(t);
            t.shape() == [steps, 3]
        };
        if !ok {
            return Err(WamError::shape(
                "forward_tokens",
                format!("{:?} block has shape {:?}", b.role, t.shape()),
            ));
        }
        if !(0.0..=1.0).contains(&b.tau) {
            return Err(WamError::InvalidArgument(format!("tau {} outside [0, 1]", b.tau)));
        }
        if b.step >= guidance.len() || b.step >= ego.len() {
            return Err(WamError::OutOfRange {
                index: b.step,
                len: guidance.len().min(ego.len()),
            });
        }
    }
    let mut parts = Vec::new();
    if !video_data.is_empty() {
        let stacked = g.constant(Tensor::concat_rows(&video_data)?);
        parts.push(g.linear(stacked, bp.v(idx.w_in), bp.v(idx.b_in))?);
    }
    if !action_data.is_empty() {
        let stacked = g.constant(Tensor::concat_rows(&action_data)?);
        parts.push(encode_actions(g, stacked, &bp.mlp(idx.ea), cfg.group_size)?);
    }
    let content = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

    let n_video_rows = video_data.len() * n_x;
    let mut order = Vec::new();
    let mut role_idx = Vec::new();
    let mut pos_idx = Vec::new();
    let mut tau_values: Vec<f64> = Vec::new();
    let mut tau_idx = Vec::new();
    let mut block_rows = Vec::with_capacity(blocks.len());
    let (mut vi, mut ai) = (0usize, 0usize);
    for b in blocks {
        let ti = match tau_values.iter().position(|t| t.to_bits() == b.tau.to_bits()) {
            Some(i) => i,
            None => {
                tau_values.push(b.tau);
                tau_values.len() - 1
            }
        };
        let start = order.len();
        let len = if b.role.is_video() { n_x } else { cfg.n_a() };
        for o in 0..len {
            if b.role.is_video() {
                order.push(vi * n_x + o);
                pos_idx.push(o);
            } else {
                order.push(n_video_rows + ai * cfg.n_a() + o);
                pos_idx.push(n_x + o);
            }
            role_idx.push(b.role.index());
            tau_idx.push(ti);
        }
        if b.role.is_video() {
            vi += 1;
        } else {
            ai += 1;
        }
        block_rows.push(start..order.len());
    }
    let n = order.len();
    if self_spans.rows != n || self_spans.cols != cache_len + n {
        return Err(WamError::shape(
            "forward_tokens",
            format!(
                "self-attention spans {}x{} vs {n} tokens over {} keys",
                self_spans.rows,
                self_spans.cols,
                cache_len + n
            ),
        ));
    }
    let content = g.gather_rows(content, order.into())?;
    let roles = g.gather_rows(bp.v(idx.role), role_idx.into())?;
    let pos_table = g.concat_rows(&[bp.v(idx.video_pos), bp.v(idx.action_pos)])?;
    let pos = g.gather_rows(pos_table, pos_idx.into())?;
    let x = g.add(content, roles)?;
    let mut x = g.add(x, pos)?;

    // tau conditioning, computed once per distinct value
    let tau_in = g.constant(tau_features(&tau_values, cfg.tau_dim)?);
    let c = bp.mlp(idx.tau).apply(g, tau_in)?;
    let c = g.silu(c);
    let tau_idx: Rc<[usize]> = tau_idx.into();

    let gemb = embed_guidance(g, guidance, bp.v(idx.guidance_table), bp.v(idx.guidance_pos))?;
    let ego_in: Vec<f64> = ego.iter().flat_map(ego_features).collect();
    let ego_in = g.constant(Tensor::matrix(ego.len(), 3, ego_in)?);
    let eemb = bp.mlp(idx.ego).apply(g, ego_in)?;

    let cross = match cross {
        Some(c) => c,
        None => CrossSpans {
            guidance: Rc::new(block_diagonal_spans(
                blocks,
                &block_rows,
                cfg.guidance_len,
                guidance.len() * cfg.guidance_len,
            )?),
            ego: Rc::new(block_diagonal_spans(blocks, &block_rows, 1, ego.len())?),
        },
    };

    let mut kv = Vec::new();
    let mut queries = Vec::new();
    for (l, li) in idx.layers.iter().enumerate() {
        let mut m = Vec::with_capacity(4);
        for (w, b) in &li.modulation {
            let per_tau = g.linear(c, bp.v(*w), bp.v(*b))?;
            m.push(g.gather_rows(per_tau, tau_idx.clone())?);
        }

        let h = modulated_norm(g, x, m[0], m[1])?;
        let q = g.matmul(h, bp.v(li.wq))?;
        let k = g.matmul(h, bp.v(li.wk))?;
        let v = g.matmul(h, bp.v(li.wv))?;
        if capture {
            queries.push(g.value(q).clone());
            kv.push(LayerKv {
                k: g.value(k).clone(),
                v: g.value(v).clone(),
            });
        }
        let (keys, values) = if cache_len > 0 {
            let ck = g.constant(cache[l].k.clone());
            let cv = g.constant(cache[l].v.clone());
            (g.concat_rows(&[ck, k])?, g.concat_rows(&[cv, v])?)
        } else {
            (k, v)
        };
        let a = g.attention(q, keys, values, self_spans.clone(), cfg.heads)?;
        let o = g.linear(a, bp.v(li.wo), bp.v(li.bo))?;
        x = g.add(x, o)?;

        let h = g.layer_norm(x);
        let q = g.matmul(h, bp.v(li.gq))?;
        let gk = g.matmul(gemb, bp.v(li.gk))?;
        let gv = g.matmul(gemb, bp.v(li.gv))?;
        let a = g.attention(q, gk, gv, cross.guidance.clone(), cfg.heads)?;
        let o = g.linear(a, bp.v(li.go), bp.v(li.gbo))?;
        x = g.add(x, o)?;

        let h = g.layer_norm(x);
        let q = g.matmul(h, bp.v(li.eq))?;
        let ek = g.matmul(eemb, bp.v(li.ek))?;
        let ev = g.matmul(eemb, bp.v(li.ev))?;
        let a = g.attention(q, ek, ev, cross.ego.clone(), cfg.heads)?;
        let o = g.linear(a, bp.v(li.eo), bp.v(li.ebo))?;
        x = g.add(x, o)?;

        let h = modulated_norm(g, x, m[2], m[3])?;
        let f = Mlp {
            w1: bp.v(li.mlp_w1),
            b1: bp.v(li.mlp_b1),
            w2: bp.v(li.mlp_w2),
            b2: bp.v(li.mlp_b2),
        }
        .apply(g, h)?;
        x = g.add(x, f)?;
    }
    let hidden = g.layer_norm(x);
    Ok(TokenPass {
        hidden,
        block_rows,
        kv,
        queries,
    })
}

/// Video velocity head on the given hidden rows, `[rows, d_z]`.
pub fn video_head(g: &mut Graph, bp: &BoundParams, hidden: Var, rows: Rc<[usize]>) -> Result<Var> {
    let idx = &bp.params.index;
    let h = g.gather_rows(hidden, rows)?;
    g.linear(h, bp.v(idx.video_head_w), bp.v(idx.video_head_b))
}

/// D_a on the given noisy-action hidden rows, `[rows * group_size, 3]`.
pub fn action_head(g: &mut Graph, bp: &BoundParams, hidden: Var, rows: Rc<[usize]>) -> Result<Var> {
    let idx = &bp.params.index;
    let h = g.gather_rows(hidden, rows)?;
    decode_action_velocity(g, h, &bp.mlp(idx.da), bp.params.config.group_size)
}

/// Spans of the teacher-forcing, guidance and ego masks for one layout.
pub struct MaskSet {
    pub layout: SequenceLayout,
    pub self_spans: Rc<Spans>,
    pub guidance_spans: Rc<Spans>,
    pub ego_spans: Rc<Spans>,
}

impl MaskSet {
    pub fn new(layout: SequenceLayout) -> Result<Self> {
        Ok(Self {
            layout,
            self_spans: Rc::new(Spans::from_mask(&build_teacher_forcing_mask(&layout).allowed)?),
            guidance_spans: Rc::new(Spans::from_mask(&build_guidance_mask(&layout).allowed)?),
            ego_spans: Rc::new(Spans::from_mask(&build_ego_mask(&layout).allowed)?),
        })
    }
}

/// One clip laid out for teacher forcing. Per-chunk vectors have `K` entries;
/// guidance and ego have `K + 1` steps.
pub struct TrainSequence<'a> {
    pub clean_video: &'a [Tensor],
    pub clean_actions: &'a [Tensor],
    pub noisy_video: &'a [Tensor],
    pub noisy_actions: &'a [Tensor],
    pub taus: &'a [f64],
    pub guidance: &'a [GuidanceChunk],
    pub ego: &'a [EgoState],
}

pub struct ForwardOutput {
    /// `[K * N_x, d_z]`, chunk-major.
    pub video_velocity: Var,
    /// `[K * steps, 3]`, chunk-major.
    pub action_velocity: Var,
}

/// Full-clip teacher-forced pass.
pub fn forward(g: &mut Graph, bp: &BoundParams, masks: &MaskSet, seq: &TrainSequence) -> Result<ForwardOutput> {
    let layout = &masks.layout;
    let k = layout.chunks;
    let lens = [
        seq.clean_video.len(),
        seq.clean_actions.len(),
        seq.noisy_video.len(),
        seq.noisy_actions.len(),
        seq.taus.len(),
    ];
    if lens.iter().any(|&l| l != k) || seq.guidance.len() != layout.steps() || seq.ego.len() != layout.steps() {
        return Err(WamError::shape(
            "forward",
            format!(
                "layout has {k} chunks; got per-chunk inputs {lens:?}, {} guidance and {} ego steps",
                seq.guidance.len(),
                seq.ego.len()
            ),
        ));
    }
    let cfg = &bp.params.config;
    if layout.n_x != cfg.n_x() || layout.n_a != cfg.n_a() || layout.guidance_len != cfg.guidance_len {
        return Err(WamError::shape("forward", "layout does not match the model config"));
    }
    let mut blocks = Vec::with_capacity(4 * k);
    for j in 0..k {
        blocks.push(TokenBlock {
            role: Role::CleanVideo,
            data: &seq.clean_video[j],
            tau: 0.0,
            step: j,
        });
        blocks.push(TokenBlock {
            role: Role::CleanAction,
            data: &seq.clean_actions[j],
            tau: 0.0,
            step: j,
        });
        blocks.push(TokenBlock {
            role: Role::NoisyVideo,
            data: &seq.noisy_video[j],
            tau: seq.taus[j],
            step: j,
        });
        blocks.push(TokenBlock {
            role: Role::NoisyAction,
            data: &seq.noisy_actions[j],
            tau: seq.taus[j],
            step: j,
        });
    }
    let cross = CrossSpans {
        guidance: masks.guidance_spans.clone(),
        ego: masks.ego_spans.clone(),
    };
    let pass = forward_tokens(
        g,
        bp,
        &blocks,
        masks.self_spans.clone(),
        &[],
        seq.guidance,
        seq.ego,
        Some(cross),
        false,
    )?;
    let nv: Rc<[usize]> = (0..k).flat_map(|j| layout.span(j, Role::NoisyVideo)).collect();
    let na: Rc<[usize]> = (0..k).flat_map(|j| layout.span(j, Role::NoisyAction)).collect();
    Ok(ForwardOutput {
        video_velocity: video_head(g, bp, pass.hidden, nv)?,
        action_velocity: action_head(g, bp, pass.hidden, na)?,
    })
}
