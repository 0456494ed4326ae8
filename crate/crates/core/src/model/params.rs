use crate::error::{Result, WamError};
use crate::mask::Role;
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

use super::ModelConfig;

/// Positions of one block's tensors in the parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIndex {
    /// Weight/bias pairs producing shift1, scale1, shift2, scale2 from the tau embedding.
    pub modulation: [(usize, usize); 4],
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub gq: usize,
    pub gk: usize,
    pub gv: usize,
    pub go: usize,
    pub gbo: usize,
    pub eq: usize,
    pub ek: usize,
    pub ev: usize,
    pub eo: usize,
    pub ebo: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub w_in: usize,
    pub b_in: usize,
    pub role: usize,
    pub video_pos: usize,
    pub action_pos: usize,
    pub tau: [usize; 4],
    pub layers: Vec<LayerIndex>,
    pub video_head_w: usize,
    pub video_head_b: usize,
    pub ea: [usize; 4],
    pub da: [usize; 4],
    pub guidance_table: usize,
    pub guidance_pos: usize,
    pub ego: [usize; 4],
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `1/sqrt(fan_in)` times the factor.
    Scaled(f64),
    Normal(f64),
    Zero,
}

struct Spec {
    name: String,
    shape: [usize; 2],
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name: name.into(),
            shape: [rows, cols],
            init,
        });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, zero: bool) -> (usize, usize) {
        let init = if zero { Init::Zero } else { Init::Scaled(1.0) };
        let w = self.add(format!("{prefix}.w"), fan_in, fan_out, init);
        let b = self.add(format!("{prefix}.b"), 1, fan_out, Init::Zero);
        (w, b)
    }

    fn mlp(&mut self, prefix: &str, din: usize, hidden: usize, dout: usize, zero_out: bool) -> [usize; 4] {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), din, hidden, false);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), hidden, dout, zero_out);
        [w1, b1, w2, b2]
    }
}

fn specs(cfg: &ModelConfig) -> (Vec<Spec>, ParamIndex) {
    let d = cfg.d;
    let mut b = Builder { specs: Vec::new() };
    let (w_in, b_in) = b.linear("embed.latent", cfg.d_z, d, false);
    let role = b.add("embed.role", Role::ORDER.len(), d, Init::Normal(0.5));
    let video_pos = b.add("embed.video_pos", cfg.n_x(), d, Init::Normal(0.1));
    let action_pos = b.add("embed.action_pos", cfg.n_a(), d, Init::Normal(0.1));
    let tau = b.mlp("tau", cfg.tau_dim, d, d, false);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("block{l}");
        let modulation = ["shift1", "scale1", "shift2", "scale2"].map(|m| b.linear(&format!("{p}.mod.{m}"), d, d, true));
        let proj = |b: &mut Builder, n: &str| b.add(format!("{p}.{n}"), d, d, Init::Scaled(1.0));
        let wq = proj(&mut b, "self.q");
        let wk = proj(&mut b, "self.k");
        let wv = proj(&mut b, "self.v");
        let (wo, bo) = b.linear(&format!("{p}.self.o"), d, d, false);
        let gq = proj(&mut b, "guide.q");
        let gk = proj(&mut b, "guide.k");
        let gv = proj(&mut b, "guide.v");
        let (go, gbo) = b.linear(&format!("{p}.guide.o"), d, d, false);
        let eq = proj(&mut b, "ego.q");
        let ek = proj(&mut b, "ego.k");
        let ev = proj(&mut b, "ego.v");
        let (eo, ebo) = b.linear(&format!("{p}.ego.o"), d, d, false);
        let [mlp_w1, mlp_b1, mlp_w2, mlp_b2] = b.mlp(&format!("{p}.mlp"), d, d * cfg.mlp_ratio, d, false);
        layers.push(LayerIndex {
            modulation,
            wq,
            wk,
            wv,
            wo,
            bo,
            gq,
            gk,
            gv,
            go,
            gbo,
            eq,
            ek,
            ev,
            eo,
            ebo,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        });
    }
    let (video_head_w, video_head_b) = b.linear("head.video", d, cfg.d_z, true);
    let ea = b.mlp("action.encoder", cfg.group_size * 3, cfg.action_hidden, d, false);
    let da = b.mlp("action.decoder", d, cfg.action_hidden, cfg.group_size * 3, true);
    let guidance_table = b.add("guidance.table", cfg.guidance_vocab, d, Init::Normal(0.5));
    let guidance_pos = b.add("guidance.pos", cfg.guidance_len, d, Init::Normal(0.1));
    let ego = b.mlp("ego", 3, d, d, false);
    let index = ParamIndex {
        w_in,
        b_in,
        role,
        video_pos,
        action_pos,
        tau,
        layers,
        video_head_w,
        video_head_b,
        ea,
        da,
        guidance_table,
        guidance_pos,
        ego,
    };
    (b.specs, index)
}

/// Parameters as an ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub index: ParamIndex,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Rebuild from stored tensors, checking names and shapes against the config.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (specs, index) = specs(&config);
        if specs.len() != names.len() || names.len() != tensors.len() {
            return Err(WamError::Parse(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((s, n), t) in specs.iter().zip(&names).zip(&tensors) {
            if &s.name != n || t.shape() != s.shape {
                return Err(WamError::Parse(format!(
                    "parameter {n} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// True for weight matrices that receive decoupled weight decay.
    pub fn decays(&self, i: usize) -> bool {
        self.tensors[i].rows() > 1 && !self.names[i].ends_with(".b")
    }
}

/// Deterministic in `(config, seed)`; velocity-producing output layers start at zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (specs, index) = specs(config);
    let mut rng = RngStream::new(seed, streams::INIT);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for s in specs {
        let n = s.shape[0] * s.shape[1];
        let data = match s.init {
            Init::Zero => vec![0.0; n],
            Init::Normal(std) => rng.normals(n).into_iter().map(|x| x * std).collect(),
            Init::Scaled(f) => {
                let std = f / (s.shape[0] as f64).sqrt();
                rng.normals(n).into_iter().map(|x| x * std).collect()
            }
        };
        names.push(s.name);
        tensors.push(Tensor::new(s.shape.to_vec(), data)?);
    }
    Ok(ModelParams {
        config: *config,
        names,
        tensors,
        index,
    })
}
