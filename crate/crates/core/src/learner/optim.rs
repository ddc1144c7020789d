use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Gradients, ParamStore};

/// Where RMSProp adds epsilon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPlacement {
    /// `g / (sqrt(m) + eps)`
    #[default]
    Outside,
    /// `g / sqrt(m + eps)`
    Inside,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub epsilon_placement: EpsilonPlacement,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learner steps between learning-rate updates.
    pub schedule_every: u64,
    pub min_lr: f64,
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            alpha: 0.99,
            epsilon: 0.01,
            epsilon_placement: EpsilonPlacement::Outside,
            momentum: 0.0,
            weight_decay: 0.0,
            schedule_every: 10,
            min_lr: 0.0,
            warmup_steps: 0,
        }
    }
}

/// RMSProp with one running mean of squared gradients per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub alpha: f64,
    pub epsilon: f64,
    pub placement: EpsilonPlacement,
    pub momentum: f64,
    pub weight_decay: f64,
    pub square_avg: Vec<Vec<f64>>,
    pub momentum_buf: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            alpha: cfg.alpha,
            epsilon: cfg.epsilon,
            placement: cfg.epsilon_placement,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            momentum_buf: if cfg.momentum > 0.0 { zeros.clone() } else { Vec::new() },
            square_avg: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(contract(format!("learning rate must be positive, got {lr}")));
        }
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            let m = &mut self.square_avg[k];
            for i in 0..p.len() {
                let gi = g[i] + self.weight_decay * p[i];
                m[i] = self.alpha * m[i] + (1.0 - self.alpha) * gi * gi;
                let denom = match self.placement {
                    EpsilonPlacement::Outside => m[i].sqrt() + self.epsilon,
                    EpsilonPlacement::Inside => (m[i] + self.epsilon).sqrt(),
                };
                let mut upd = gi / denom;
                if self.momentum > 0.0 {
                    let b = &mut self.momentum_buf[k][i];
                    *b = self.momentum * *b + upd;
                    upd = *b;
                }
                p[i] -= lr * upd;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant cosine decay with optional linear warmup:
/// `min + (base - min)(1 + cos(π · floor(step/every) · every / total)) / 2`.
pub fn cosine_schedule(step: u64, base_lr: f64, total_steps: u64, every: u64, min_lr: f64, warmup: u64) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let every = every.max(1);
    let stepped = (step / every) * every;
    let progress = (stepped.min(total_steps) as f64) / total_steps.max(1) as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
