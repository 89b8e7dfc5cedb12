//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use super::{Grads, NamedTensor, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v = m v + (g + wd p); p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    /// Current learning rate (the schedule writes here).
    pub lr: f32,
    velocity: Option<Grads>,
    trainable: Option<Vec<bool>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            velocity: None,
            trainable: None,
        }
    }

    /// Restricts updates to tensors whose flag is true.
    pub fn with_trainable(mut self, mask: Vec<bool>) -> Self {
        self.trainable = Some(mask);
        self
    }

    /// Momentum buffers as named tensors mirroring `params` (zeros before
    /// the first step).
    pub fn state(&self, params: &ParamSet) -> ParamSet {
        let mut out = ParamSet::default();
        for (i, t) in params.entries.iter().enumerate() {
            let data = match &self.velocity {
                Some(v) => v[i].clone(),
                None => vec![0.0; t.data.len()],
            };
            out.push(NamedTensor {
                name: format!("momentum.{}", t.name),
                shape: t.shape.clone(),
                data,
            });
        }
        out
    }

    pub fn restore(&mut self, state: &ParamSet) {
        self.velocity = Some(state.entries.iter().map(|t| t.data.clone()).collect());
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        let velocity = self
            .velocity
            .get_or_insert_with(|| params.zero_grads());
        let (m, wd, lr) = (self.config.momentum, self.config.weight_decay, self.lr);
        for (i, (t, g)) in params.entries.iter_mut().zip(grads).enumerate() {
            if self.trainable.as_ref().is_some_and(|mask| !mask[i]) {
                continue;
            }
            let v = &mut velocity[i];
            for ((p, &g), v) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Cosine decay from `base` to 0 over `total` epochs.
pub fn cosine_lr(base: f32, epoch: usize, total: usize) -> f32 {
    if total <= 1 {
        return base;
    }
    let t = epoch as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}
