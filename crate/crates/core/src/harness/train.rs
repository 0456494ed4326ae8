use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::flow::{augment_history, flow_point, joint_loss, LossWeights};
use crate::guidance::GuidanceMode;
use crate::model::{forward, init_model, BoundParams, MaskSet, ModelConfig, ModelParams, TrainSequence};
use crate::rng::{streams, RngStream};
use crate::sim::{Clip, RenderConfig};
use crate::tensor::{Graph, Tensor};
use crate::tokenize::{ActionStats, Projector};

use super::checkpoint::Checkpoint;
use super::data::{clip_latents, load_manifest_clips, prepare_clip, LatentStats, PreparedClip, Preprocessing};
use super::optim::{clip_grad_norm, AdamW, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Clips per optimizer step.
    pub batch_size: usize,
    pub loss: LossWeights,
    pub sigma_max: f64,
    pub model: ModelConfig,
    pub seed: u64,
    /// Fractions of `iterations` at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub optimizer: AdamWConfig,
    pub guidance: GuidanceMode,
    /// JSON-lines loss log, one record per iteration.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/train/manifest.json"),
            iterations: 5000,
            learning_rate: 1e-3,
            batch_size: 8,
            loss: LossWeights::default(),
            sigma_max: 0.2,
            model: ModelConfig::default(),
            seed: 0,
            milestones: vec![0.5, 0.7, 0.9],
            decay_factor: 0.5,
            grad_clip: Some(1.0),
            optimizer: AdamWConfig::default(),
            guidance: GuidanceMode::SceneEvolving,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(WamError::InvalidArgument("iterations and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_factor > 0.0) {
            return Err(WamError::InvalidArgument("learning rate and decay factor must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1]) || self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(WamError::InvalidArgument(format!(
                "milestones must be sorted fractions in [0, 1], got {:?}",
                self.milestones
            )));
        }
        if self.loss.video < 0.0 || self.loss.action < 0.0 {
            return Err(WamError::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.sigma_max >= 0.0) {
            return Err(WamError::InvalidArgument("sigma_max must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| iteration as f64 >= m * self.iterations as f64)
            .count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub video_loss: f64,
    pub action_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

/// Fit the frozen preprocessing on a training split.
pub fn fit_preprocessing(clips: &[Clip], cfg: &TrainConfig) -> Result<Preprocessing> {
    let m = &cfg.model;
    let projector = Projector::random(m.d_z, m.video.patch_dim(), cfg.seed)?;
    let mut latents = Vec::new();
    for c in clips {
        super::data::check_geometry(c, m)?;
        latents.extend(clip_latents(c, m, &projector)?);
    }
    Ok(Preprocessing {
        latent_stats: LatentStats::fit(&latents)?,
        action_stats: ActionStats::from_actions(clips.iter().flat_map(|c| c.actions.iter()))?,
        projector,
        guidance: cfg.guidance,
        render: RenderConfig::default(),
    })
}

struct Streams {
    batch: RngStream,
    noise: RngStream,
    tau: RngStream,
    aug: RngStream,
}

/// Teacher-forced inputs for one clip: layout chunk `j` targets clip chunk `j + 1`.
struct Sample {
    clean_video: Vec<Tensor>,
    clean_actions: Vec<Tensor>,
    noisy_video: Vec<Tensor>,
    noisy_actions: Vec<Tensor>,
    taus: Vec<f64>,
    target_video: Tensor,
    target_action: Tensor,
}

fn make_sample(clip: &PreparedClip, sigma_max: f64, s: &mut Streams) -> Result<Sample> {
    let k = clip.chunks() - 1;
    let mut out = Sample {
        clean_video: Vec::with_capacity(k),
        clean_actions: Vec::with_capacity(k),
        noisy_video: Vec::with_capacity(k),
        noisy_actions: Vec::with_capacity(k),
        taus: Vec::with_capacity(k),
        target_video: Tensor::zeros(&[0]),
        target_action: Tensor::zeros(&[0]),
    };
    let mut tv = Vec::with_capacity(k);
    let mut ta = Vec::with_capacity(k);
    for j in 0..k {
        let (zv, za) = (&clip.latents[j + 1], &clip.actions_norm[j + 1]);
        let tau = s.tau.uniform();
        let ev = Tensor::new(zv.shape().to_vec(), s.noise.normals(zv.len()))?;
        let ea = Tensor::new(za.shape().to_vec(), s.noise.normals(za.len()))?;
        let fv = flow_point(zv, &ev, tau)?;
        let fa = flow_point(za, &ea, tau)?;
        out.clean_video.push(augment_history(zv, sigma_max, &mut s.aug)?.0);
        out.clean_actions.push(za.clone());
        out.noisy_video.push(fv.noised);
        out.noisy_actions.push(fa.noised);
        out.taus.push(tau);
        tv.push(fv.target_velocity);
        ta.push(fa.target_velocity);
    }
    out.target_video = Tensor::concat_rows(&tv.iter().collect::<Vec<_>>())?;
    out.target_action = Tensor::concat_rows(&ta.iter().collect::<Vec<_>>())?;
    Ok(out)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Load the manifest named in the config and train on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (_, clips) = load_manifest_clips(&cfg.manifest)?;
    train_on_clips(cfg, &clips)
}

pub fn train_on_clips(cfg: &TrainConfig, clips: &[Clip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(WamError::InvalidArgument("training set is empty".into()));
    }
    let pre = fit_preprocessing(clips, cfg)?;
    let data: Vec<PreparedClip> = clips.iter().map(|c| prepare_clip(c, &cfg.model, &pre)).collect::<Result<_>>()?;
    train_prepared(cfg, pre, &data)
}

pub fn train_prepared(cfg: &TrainConfig, pre: Preprocessing, data: &[PreparedClip]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_model(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut s = Streams {
        batch: RngStream::new(cfg.seed, streams::BATCH),
        noise: RngStream::new(cfg.seed, streams::FLOW_NOISE),
        tau: RngStream::new(cfg.seed, streams::FLOW_TAU),
        aug: RngStream::new(cfg.seed, streams::HISTORY_AUG),
    };
    let mut masks: HashMap<usize, MaskSet> = HashMap::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut writer = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| WamError::io(p, e))?)),
        None => None,
    };
    for it in 0..cfg.iterations {
        let lr = cfg.lr_at(it);
        let mut grads: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let (mut loss, mut lv, mut la) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let i = ((s.batch.uniform() * data.len() as f64) as usize).min(data.len() - 1);
            let clip = &data[i];
            let k = clip.chunks() - 1;
            if let std::collections::hash_map::Entry::Vacant(e) = masks.entry(k) {
                e.insert(MaskSet::new(cfg.model.layout(k)?)?);
            }
            let sample = make_sample(clip, cfg.sigma_max, &mut s)?;
            let (l, v, a) = clip_gradients(&params, &masks[&k], clip, &sample, cfg.loss, &mut grads)?;
            loss += l;
            lv += v;
            la += a;
        }
        let b = cfg.batch_size as f64;
        let (loss, lv, la) = (loss / b, lv / b, la / b);
        if !loss.is_finite() {
            return Err(WamError::Diverged { iteration: it });
        }
        grads.iter_mut().flatten().for_each(|g| *g /= b);
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt(),
        };
        if !grad_norm.is_finite() {
            return Err(WamError::Diverged { iteration: it });
        }
        opt.update(&mut params, &grads, lr)?;
        let rec = LossRecord {
            iteration: it,
            loss,
            video_loss: lv,
            action_loss: la,
            lr,
            grad_norm,
        };
        if let Some(w) = writer.as_mut() {
            let path = cfg.log_path.as_deref().unwrap_or(Path::new(""));
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n").map_err(|e| WamError::io(path, e))?;
        }
        log.push(rec);
    }
    if let (Some(w), Some(p)) = (writer.as_mut(), &cfg.log_path) {
        w.flush().map_err(|e| WamError::io(p, e))?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            pre,
            optimizer: opt,
            iteration: cfg.iterations,
            rng: vec![s.batch.state(), s.noise.state(), s.tau.state(), s.aug.state()],
        },
        log,
    })
}

/// Forward and backward for one clip; gradients are added into `acc`.
/// Returns (weighted loss, video mse, action mse).
fn clip_gradients(
    params: &ModelParams,
    masks: &MaskSet,
    clip: &PreparedClip,
    s: &Sample,
    weights: LossWeights,
    acc: &mut [Vec<f64>],
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, true);
    let seq = TrainSequence {
        clean_video: &s.clean_video,
        clean_actions: &s.clean_actions,
        noisy_video: &s.noisy_video,
        noisy_actions: &s.noisy_actions,
        taus: &s.taus,
        guidance: &clip.guidance,
        ego: &clip.ego,
    };
    let out = forward(&mut g, &bp, masks, &seq)?;
    let tv = g.constant(s.target_video.clone());
    let ta = g.constant(s.target_action.clone());
    let loss = joint_loss(&mut g, out.video_velocity, tv, out.action_velocity, ta, weights)?;
    let lv = mse(g.value(out.video_velocity), &s.target_video);
    let la = mse(g.value(out.action_velocity), &s.target_action);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    for (a, v) in acc.iter_mut().zip(&bp.vars) {
        if let Some(gr) = grads.get(*v) {
            a.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
        }
    }
    Ok((value, lv, la))
}

/// Mean loss over the first and last `window` records.
pub fn smoothed_ends(log: &[LossRecord], window: usize) -> (f64, f64) {
    let w = window.min(log.len()).max(1);
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len().max(1) as f64;
    (mean(&log[..w.min(log.len())]), mean(&log[log.len().saturating_sub(w)..]))
}
