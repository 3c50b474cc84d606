use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::params::{Grads, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: 1.0,
        }
    }
}

/// Linear warmup then cosine decay to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup.min(step)) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct AdamW {
    pub cfg: OptimConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamSet) -> Self {
        let zeros = || params.values().iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update at learning rate `lr`; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) -> f64 {
        let norm = grads.norm();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads.0[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k] * clip;
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * (mh / (vh.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[k]);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(1.0, 0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 9, 10, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 10, 100) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 10, 100).abs() < 1e-12);
        assert!((cosine_lr(1.0, 55, 10, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("x", Mat::row_vec(vec![3.0, -2.0]));
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..500 {
            let g = Grads(vec![ps.value(0).scaled(2.0)]);
            opt.step(&mut ps, &g, 0.05);
        }
        assert!(ps.value(0).norm_sq() < 1e-4);
    }
}
