//! Rectified-flow path, velocity targets, joint loss and history augmentation.
//!
//! `x_tau = (1 - tau) * data + tau * eps`, so `tau = 0` is clean data and
//! `tau = 1` is pure noise; the target velocity is `eps - data`.

use crate::error::{Result, WamError};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub tau: f64,
    pub noised: Tensor,
    pub target_velocity: Tensor,
}

/// Point on the path for given noise and time.
pub fn flow_point(data: &Tensor, eps: &Tensor, tau: f64) -> Result<FlowSample> {
    if data.shape() != eps.shape() {
        return Err(WamError::shape(
            "flow_point",
            format!("data {:?} vs noise {:?}", data.shape(), eps.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(WamError::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    if !data.is_finite() {
        return Err(WamError::NonFinite("flow sample data".into()));
    }
    let noised = data
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| if tau == 1.0 { e } else { (1.0 - tau) * x + tau * e })
        .collect();
    let target = data.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
    Ok(FlowSample {
        tau,
        noised: Tensor::new(data.shape().to_vec(), noised)?,
        target_velocity: Tensor::new(data.shape().to_vec(), target)?,
    })
}

/// Draw `eps ~ N(0, I)` from `noise` and `tau ~ U[0, 1]` from `tau_rng`.
pub fn make_flow_sample(data: &Tensor, noise: &mut RngStream, tau_rng: &mut RngStream) -> Result<FlowSample> {
    let tau = tau_rng.uniform();
    make_flow_sample_at(data, tau, noise)
}

/// As [`make_flow_sample`] with `tau` pinned.
pub fn make_flow_sample_at(data: &Tensor, tau: f64, noise: &mut RngStream) -> Result<FlowSample> {
    let eps = Tensor::new(data.shape().to_vec(), noise.normals(data.len()))?;
    flow_point(data, &eps, tau)
}

/// Per-stream weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub video: f64,
    pub action: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            video: 1.0,
            action: 1.0,
        }
    }
}

/// `w_v * mean|v_pred - v|^2 + w_a * mean|a_pred - a|^2`, each mean over its own elements.
pub fn joint_loss(
    g: &mut Graph,
    pred_video: Var,
    target_video: Var,
    pred_action: Var,
    target_action: Var,
    weights: LossWeights,
) -> Result<Var> {
    if weights.video < 0.0 || weights.action < 0.0 {
        return Err(WamError::InvalidArgument(format!("negative loss weight {weights:?}")));
    }
    let rv = g.sub(pred_video, target_video)?;
    let ra = g.sub(pred_action, target_action)?;
    let lv = g.mean_square(rv);
    let la = g.mean_square(ra);
    let lv = g.scale(lv, weights.video);
    let la = g.scale(la, weights.action);
    g.add(lv, la)
}

/// Add `N(0, sigma^2)` noise to one chunk of clean context tokens, `sigma ~ U[0, sigma_max]`.
/// Returns the perturbed tokens and the drawn sigma.
pub fn augment_history(tokens: &Tensor, sigma_max: f64, rng: &mut RngStream) -> Result<(Tensor, f64)> {
    if !(sigma_max >= 0.0) {
        return Err(WamError::InvalidArgument(format!("sigma_max {sigma_max} must be >= 0")));
    }
    if sigma_max == 0.0 {
        return Ok((tokens.clone(), 0.0));
    }
    let sigma = rng.uniform() * sigma_max;
    let noise = rng.normals(tokens.len());
    let data = tokens.data().iter().zip(noise).map(|(x, n)| x + sigma * n).collect();
    Ok((Tensor::new(tokens.shape().to_vec(), data)?, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::matrix(rows, cols, RngStream::new(seed, 40).normals(rows * cols)).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let data = t(5, 4, 1);
        let eps = t(5, 4, 2);
        assert_eq!(flow_point(&data, &eps, 0.0).unwrap().noised, data);
        assert_eq!(flow_point(&data, &eps, 1.0).unwrap().noised, eps);
        let zero = Tensor::zeros(&[5, 4]);
        let mid = flow_point(&zero, &eps, 0.5).unwrap();
        for (n, e) in mid.noised.data().iter().zip(eps.data()) {
            assert_eq!(*n, 0.5 * e);
        }
        assert_eq!(mid.target_velocity, eps);
        assert!(flow_point(&data, &eps, 1.5).is_err());
        assert!(flow_point(&data, &t(4, 5, 2), 0.5).is_err());
    }

    #[test]
    fn sampled_endpoints_match_noise() {
        let data = t(3, 3, 5);
        let mut a = RngStream::new(9, 4);
        let mut b = RngStream::new(9, 4);
        let s = make_flow_sample_at(&data, 1.0, &mut a).unwrap();
        let eps = Tensor::matrix(3, 3, b.normals(9)).unwrap();
        assert_eq!(s.noised, eps);
    }

    #[test]
    fn loss_arithmetic() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        // video residual mean square 2, action 3
        let pv = g.constant(Tensor::matrix(1, 2, vec![2.0_f64.sqrt(), -(2.0_f64.sqrt())]).unwrap());
        let pa = g.constant(Tensor::matrix(1, 2, vec![3.0_f64.sqrt(), 3.0_f64.sqrt()]).unwrap());
        let l = joint_loss(&mut g, pv, zero, pa, zero, LossWeights::default()).unwrap();
        assert!((g.value(l).item() - 5.0).abs() < 1e-12);
        let l = joint_loss(&mut g, pv, zero, pa, zero, LossWeights { video: 1.0, action: 0.0 }).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
        let l = joint_loss(&mut g, zero, zero, zero, zero, LossWeights::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(joint_loss(&mut g, pv, zero, pa, zero, LossWeights { video: -1.0, action: 1.0 }).is_err());
    }

    #[test]
    fn augmentation_statistics() {
        let tokens = Tensor::zeros(&[64, 48]);
        let mut rng = RngStream::new(3, 6);
        assert_eq!(augment_history(&tokens, 0.0, &mut rng).unwrap().0, tokens);
        for _ in 0..20 {
            let (out, sigma) = augment_history(&tokens, 0.2, &mut rng).unwrap();
            if sigma < 1e-3 {
                continue;
            }
            let sd = (out.data().iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
            assert!((sd / sigma - 1.0).abs() < 0.1, "{sd} vs {sigma}");
        }
        let a = augment_history(&tokens, 0.2, &mut RngStream::new(1, 1)).unwrap();
        let b = augment_history(&tokens, 0.2, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn reconstruction_and_tau_independence(seed in 0u64..1000, tau in 0.0f64..=1.0, tau2 in 0.0f64..=1.0) {
            let data = t(4, 3, seed);
            let eps = t(4, 3, seed + 7);
            let s = flow_point(&data, &eps, tau).unwrap();
            for i in 0..data.len() {
                let rec = s.noised.data()[i] - tau * s.target_velocity.data()[i];
                prop_assert!((rec - data.data()[i]).abs() < 1e-12);
            }
            let s2 = flow_point(&data, &eps, tau2).unwrap();
            prop_assert_eq!(s.target_velocity, s2.target_velocity);
        }

        #[test]
        fn loss_symmetric(seed in 0u64..1000) {
            let mut g = Graph::new();
            let (a, b, c, d) = (t(2, 3, seed), t(2, 3, seed + 1), t(4, 3, seed + 2), t(4, 3, seed + 3));
            let (va, vb, vc, vd) = (g.constant(a), g.constant(b), g.constant(c), g.constant(d));
            let l1 = joint_loss(&mut g, va, vb, vc, vd, LossWeights::default()).unwrap();
            let l2 = joint_loss(&mut g, vb, va, vd, vc, LossWeights::default()).unwrap();
            prop_assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-12);
            prop_assert!(g.value(l1).item() > 0.0);
        }
    }
}
