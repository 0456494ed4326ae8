use super::*;
use crate::flow::{joint_loss, LossWeights};
use crate::guidance::{GuidanceChunk, GuidanceToken};
use crate::mask::Role;
use crate::rng::RngStream;
use crate::sim::EgoState;
use crate::tensor::{gradcheck_sampled, Graph, Tensor};
use crate::tokenize::VideoGeometry;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        d_z: 4,
        video: VideoGeometry {
            frames: 1,
            height: 8,
            width: 8,
            channels: 1,
            patch: 4,
        },
        action_steps: 8,
        group_size: 4,
        k_max: 4,
        guidance_len: 3,
        mlp_ratio: 2,
        tau_dim: 4,
        action_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Replace zero-initialized tensors with noise so every path carries gradient.
pub(crate) fn randomized(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = init_model(cfg, seed).unwrap();
    let mut rng = RngStream::new(seed, 77);
    for t in p.tensors.iter_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            let noise = rng.normals(t.len());
            t.data_mut().iter_mut().zip(noise).for_each(|(x, n)| *x = 0.3 * n);
        }
    }
    p
}

pub(crate) struct Inputs {
    pub clean_video: Vec<Tensor>,
    pub clean_actions: Vec<Tensor>,
    pub noisy_video: Vec<Tensor>,
    pub noisy_actions: Vec<Tensor>,
    pub taus: Vec<f64>,
    pub guidance: Vec<GuidanceChunk>,
    pub ego: Vec<EgoState>,
}

impl Inputs {
    pub fn random(cfg: &ModelConfig, k: usize, seed: u64) -> Self {
        let mut r = RngStream::new(seed, 55);
        let mut mat = |rows: usize, cols: usize| Tensor::matrix(rows, cols, r.normals(rows * cols)).unwrap();
        let clean_video = (0..k).map(|_| mat(cfg.n_x(), cfg.d_z)).collect();
        let clean_actions = (0..k).map(|_| mat(cfg.action_steps, 3)).collect();
        let noisy_video = (0..k).map(|_| mat(cfg.n_x(), cfg.d_z)).collect();
        let noisy_actions = (0..k).map(|_| mat(cfg.action_steps, 3)).collect();
        let mut r = RngStream::new(seed, 56);
        let taus = (0..k).map(|_| r.uniform()).collect();
        let guidance = (0..=k)
            .map(|s| GuidanceChunk {
                step_index: s,
                token_ids: (0..cfg.guidance_len)
                    .map(|_| (r.uniform() * GuidanceToken::COUNT as f64) as u8)
                    .collect(),
            })
            .collect();
        let ego = (0..=k)
            .map(|_| EgoState {
                velocity: r.range(0.0, 12.0),
                acceleration: r.range(-2.0, 2.0),
                curvature: r.range(-0.05, 0.05),
            })
            .collect();
        Self {
            clean_video,
            clean_actions,
            noisy_video,
            noisy_actions,
            taus,
            guidance,
            ego,
        }
    }

    pub fn seq(&self) -> TrainSequence<'_> {
        TrainSequence {
            clean_video: &self.clean_video,
            clean_actions: &self.clean_actions,
            noisy_video: &self.noisy_video,
            noisy_actions: &self.noisy_actions,
            taus: &self.taus,
            guidance: &self.guidance,
            ego: &self.ego,
        }
    }
}

fn outputs(params: &ModelParams, inputs: &Inputs) -> (Tensor, Tensor) {
    let k = inputs.taus.len();
    let masks = MaskSet::new(params.config.layout(k).unwrap()).unwrap();
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, false);
    let out = forward(&mut g, &bp, &masks, &inputs.seq()).unwrap();
    (g.value(out.video_velocity).clone(), g.value(out.action_velocity).clone())
}

fn chunk_rows(t: &Tensor, per_chunk: usize, j: usize) -> Vec<u64> {
    t.data()[j * per_chunk * t.cols()..(j + 1) * per_chunk * t.cols()]
        .iter()
        .map(|x| x.to_bits())
        .collect()
}

#[test]
fn init_is_deterministic_and_heads_start_at_zero() {
    let cfg = tiny_config();
    let a = init_model(&cfg, 3).unwrap();
    assert_eq!(a, init_model(&cfg, 3).unwrap());
    assert_ne!(a, init_model(&cfg, 4).unwrap());
    let (v, act) = outputs(&a, &Inputs::random(&cfg, 2, 1));
    assert!(v.data().iter().all(|&x| x == 0.0));
    assert!(act.data().iter().all(|&x| x == 0.0));
    assert_eq!(v.shape(), &[2 * cfg.n_x(), cfg.d_z]);
    assert_eq!(act.shape(), &[2 * cfg.action_steps, 3]);
}

#[test]
fn future_inputs_do_not_reach_earlier_chunks() {
    let cfg = tiny_config();
    let p = randomized(&cfg, 5);
    for k in 1..=4 {
        let base = Inputs::random(&cfg, k, 10 + k as u64);
        let (bv, ba) = outputs(&p, &base);
        for j in 0..k {
            let mut other = Inputs::random(&cfg, k, 100 + k as u64);
            // keep chunks <= j and steps <= j; everything later differs
            for i in 0..=j {
                other.clean_video[i] = base.clean_video[i].clone();
                other.clean_actions[i] = base.clean_actions[i].clone();
                other.noisy_video[i] = base.noisy_video[i].clone();
                other.noisy_actions[i] = base.noisy_actions[i].clone();
                other.taus[i] = base.taus[i];
                other.guidance[i] = base.guidance[i].clone();
                other.ego[i] = base.ego[i];
            }
            let (ov, oa) = outputs(&p, &other);
            for i in 0..=j {
                assert_eq!(chunk_rows(&bv, cfg.n_x(), i), chunk_rows(&ov, cfg.n_x(), i), "K={k} j={j}");
                assert_eq!(chunk_rows(&ba, cfg.action_steps, i), chunk_rows(&oa, cfg.action_steps, i));
            }
            if j + 1 < k {
                assert_ne!(chunk_rows(&bv, cfg.n_x(), j + 1), chunk_rows(&ov, cfg.n_x(), j + 1));
            }
        }
    }
}

#[test]
fn conditioning_is_step_local() {
    let cfg = tiny_config();
    let p = randomized(&cfg, 6);
    let base = Inputs::random(&cfg, 2, 20);
    let (bv, ba) = outputs(&p, &base);

    // the final guidance and ego step is never attended
    let mut other = Inputs::random(&cfg, 2, 20);
    other.guidance[2].token_ids = vec![GuidanceToken::PAD_ID; cfg.guidance_len];
    other.ego[2] = EgoState::default();
    assert_eq!(outputs(&p, &other), (bv.clone(), ba.clone()));

    // step 0 guidance affects chunk 0 only; chunk 1 sees chunk 0 through clean copies,
    // which carry the same guidance, so it moves too
    let mut other = Inputs::random(&cfg, 2, 20);
    other.guidance[1].token_ids = vec![GuidanceToken::Stop as u8; cfg.guidance_len];
    let (ov, oa) = outputs(&p, &other);
    assert_eq!(chunk_rows(&bv, cfg.n_x(), 0), chunk_rows(&ov, cfg.n_x(), 0));
    assert_eq!(chunk_rows(&ba, cfg.action_steps, 0), chunk_rows(&oa, cfg.action_steps, 0));
    assert_ne!(chunk_rows(&bv, cfg.n_x(), 1), chunk_rows(&ov, cfg.n_x(), 1));

    let mut other = Inputs::random(&cfg, 2, 20);
    other.ego[1].velocity += 3.0;
    let (ov, _) = outputs(&p, &other);
    assert_eq!(chunk_rows(&bv, cfg.n_x(), 0), chunk_rows(&ov, cfg.n_x(), 0));
    assert_ne!(chunk_rows(&bv, cfg.n_x(), 1), chunk_rows(&ov, cfg.n_x(), 1));

    // a chunk's tau moves only that chunk
    let mut other = Inputs::random(&cfg, 2, 20);
    other.taus[1] = (other.taus[1] + 0.3) % 1.0;
    let (ov, _) = outputs(&p, &other);
    assert_eq!(chunk_rows(&bv, cfg.n_x(), 0), chunk_rows(&ov, cfg.n_x(), 0));
    assert_ne!(chunk_rows(&bv, cfg.n_x(), 1), chunk_rows(&ov, cfg.n_x(), 1));
}

#[test]
fn noisy_action_ignores_its_own_clean_action() {
    let cfg = tiny_config();
    let p = randomized(&cfg, 7);
    let base = Inputs::random(&cfg, 2, 30);
    let (_, ba) = outputs(&p, &base);
    let mut other = Inputs::random(&cfg, 2, 30);
    other.clean_actions[1] = Tensor::filled(&[cfg.action_steps, 3], 9.0);
    let (_, oa) = outputs(&p, &other);
    assert_eq!(chunk_rows(&ba, cfg.action_steps, 1), chunk_rows(&oa, cfg.action_steps, 1));
}

#[test]
fn output_shapes_do_not_depend_on_depth_or_heads() {
    for (layers, heads) in [(1, 1), (2, 2), (3, 4)] {
        let cfg = ModelConfig {
            layers,
            heads,
            ..tiny_config()
        };
        let (v, a) = outputs(&randomized(&cfg, 1), &Inputs::random(&cfg, 3, 1));
        assert_eq!(v.shape(), &[3 * cfg.n_x(), cfg.d_z]);
        assert_eq!(a.shape(), &[3 * cfg.action_steps, 3]);
    }
    assert!(ModelConfig { heads: 3, ..tiny_config() }.validate().is_err());
}

#[test]
fn joint_loss_gradcheck() {
    let cfg = tiny_config();
    let p = randomized(&cfg, 11);
    let inputs = Inputs::random(&cfg, 2, 12);
    let masks = MaskSet::new(cfg.layout(2).unwrap()).unwrap();
    let mut r = RngStream::new(13, 1);
    let tv = Tensor::matrix(2 * cfg.n_x(), cfg.d_z, r.normals(2 * cfg.n_x() * cfg.d_z)).unwrap();
    let ta = Tensor::matrix(2 * cfg.action_steps, 3, r.normals(2 * cfg.action_steps * 3)).unwrap();
    let report = gradcheck_sampled(
        |g, vars| {
            let bp = BoundParams {
                params: &p,
                vars: vars.to_vec(),
            };
            let out = forward(g, &bp, &masks, &inputs.seq())?;
            let tvv = g.constant(tv.clone());
            let tav = g.constant(ta.clone());
            joint_loss(g, out.video_velocity, tvv, out.action_velocity, tav, LossWeights::default())
        },
        &p.tensors,
        1e-5,
        6,
    )
    .unwrap();
    assert!(report.max_error() < 1e-4, "{:?}", report.per_param);
}

#[test]
fn masks_follow_the_layout() {
    let cfg = tiny_config();
    let m = MaskSet::new(cfg.layout(3).unwrap()).unwrap();
    let l = m.layout;
    let r = l.span(2, Role::NoisyVideo).start;
    assert_eq!(m.self_spans.count(r), 2 * (cfg.n_x() + cfg.n_a()) + cfg.n_x());
    assert!(cfg.layout(5).is_err());
}
