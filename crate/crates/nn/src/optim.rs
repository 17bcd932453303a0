//! First-order optimizers and learning-rate schedules.
//!
//! Optimizers only ever write to trainable parameters; frozen parameters are
//! left untouched bit for bit.

use std::f64::consts::PI;

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, store: &ParamStore) -> Self {
        Self {
            kind,
            weight_decay,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`. Decoupled weight decay is
    /// applied to rank >= 2 tensors only.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let decay = if store.value(id).shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let p = store.value_mut(id).data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        let mj = &mut m.data_mut()[j];
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        let mhat = *mj / bc1;
                        let vj = &mut v.data_mut()[j];
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        let vhat = *vj / bc2;
                        p[j] -= lr * (mhat / (vhat.sqrt() + eps) + decay * p[j]);
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let p = store.value_mut(id).data_mut();
                    for j in 0..p.len() {
                        let mj = &mut m.data_mut()[j];
                        *mj = momentum * *mj + g.data()[j] + decay * p[j];
                        p[j] -= lr * *mj;
                    }
                }
            }
        }
    }
}

/// Cosine decay from `base` to `base * floor_ratio` over `total_steps`, with
/// an optional linear warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub floor_ratio: f64,
}

impl CosineSchedule {
    pub fn new(base: f64, total_steps: usize) -> Self {
        Self {
            base,
            total_steps: total_steps.max(1),
            warmup_steps: 0,
            floor_ratio: 0.05,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps.min(self.total_steps)).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.base * self.floor_ratio;
        floor + 0.5 * (self.base - floor) * (1.0 + (PI * progress).cos())
    }
}
