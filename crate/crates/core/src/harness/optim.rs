use serde::{Deserialize, Serialize};

use crate::error::{Result, WamError};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Adam with decoupled weight decay on weight matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.tensors.len() || grads.iter().zip(&params.tensors).any(|(g, t)| g.len() != t.len()) {
            return Err(WamError::shape("AdamW::update", "gradients do not match parameters"));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..grads.len() {
            let decay = if params.decays(i) { lr * c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.tensors[i].data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= decay * *p;
                *p -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        };
        let mut p = init_model(&cfg, 1).unwrap();
        let before = p.clone();
        let grads: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.5; t.len()]).collect();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &p,
        );
        opt.update(&mut p, &grads, 0.01).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        for (a, b) in p.tensors.iter().zip(&before.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decay_only_touches_matrices() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        };
        let mut p = init_model(&cfg, 2).unwrap();
        let before = p.clone();
        let grads: Vec<Vec<f64>> = p.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.update(&mut p, &grads, 0.1).unwrap();
        for i in 0..p.tensors.len() {
            let shrunk = p.tensors[i].data().iter().zip(before.tensors[i].data()).all(|(x, y)| (x - 0.99 * y).abs() < 1e-15);
            let same = p.tensors[i] == before.tensors[i];
            if p.decays(i) {
                assert!(shrunk, "{}", p.names[i]);
            } else {
                assert!(same, "{}", p.names[i]);
            }
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
