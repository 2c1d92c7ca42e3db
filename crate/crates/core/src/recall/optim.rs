//! AdamW with linear warmup, cosine step-size decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Final step size as a fraction of `lr`.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
}

fn default_lr() -> f64 {
    3e-3
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_min_lr_ratio() -> f64 {
    0.1
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            clip: default_clip(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_steps: 0,
            min_lr_ratio: default_min_lr_ratio(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.clip >= 0.0 && self.eps > 0.0) {
            return invalid("weight_decay and clip must be non-negative, eps positive");
        }
        if !(unit(self.beta1) && unit(self.beta2) && (0.0..=1.0).contains(&self.min_lr_ratio)) {
            return invalid("betas must lie in [0, 1) and min_lr_ratio in [0, 1]");
        }
        Ok(())
    }

    /// Step size for 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

pub struct AdamW<T> {
    cfg: OptimConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, num_params: usize) -> Self {
        Self { cfg, m: vec![T::zero(); num_params], v: vec![T::zero(); num_params], t: 0 }
    }

    /// Apply one update and return the gradient norm before clipping.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P, lr: f64) -> T {
        let g = grads.flatten();
        assert_eq!(g.len(), self.m.len(), "gradient does not match optimizer state");
        let norm = g.iter().map(|x| *x * *x).sum::<T>().sqrt();
        let clip = T::of(self.cfg.clip);
        let scale = if self.cfg.clip > 0.0 && norm > clip { clip / norm } else { T::one() };

        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, decay, eps) = (T::of(lr), T::one() - T::of(lr * self.cfg.weight_decay), T::of(self.cfg.eps));
        let mut i = 0;
        params.visit_mut(&mut |_, tensor| {
            for p in tensor.iter_mut() {
                let gi = g[i] * scale;
                self.m[i] = b1 * self.m[i] + (T::one() - b1) * gi;
                self.v[i] = b2 * self.v[i] + (T::one() - b2) * gi * gi;
                let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                *p = *p * decay - lr * update;
                i += 1;
            }
        });
        norm
    }
}
