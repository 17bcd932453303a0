//! Shared minibatch training loop with best-epoch checkpoint selection.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sourceaware_nn::{CosineSchedule, Gradients, Optimizer, OptimizerKind, ParamStore};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, macro_f1_multiclass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerChoice,
    pub warmup_steps: usize,
    /// Stop after this many optimizer steps (used by short test runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerChoice::Adam,
            warmup_steps: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::SgdMomentum => OptimizerKind::SgdMomentum { momentum: 0.9 },
        }
    }
}

/// Validation scores used for checkpoint selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub acc: f64,
    pub macro_f1: f64,
    /// Absent when validation holds a single class.
    pub auc: Option<f64>,
}

impl EvalSummary {
    /// Binary scores from `p(class 1)`; a probability of exactly 0.5 counts as class 1.
    pub fn binary(labels: &[usize], p_pos: &[f64]) -> Result<Self> {
        let preds: Vec<usize> = p_pos.iter().map(|&p| usize::from(p >= 0.5)).collect();
        Self::from_predictions(labels, &preds, 2, Some(p_pos))
    }

    pub fn from_predictions(labels: &[usize], preds: &[usize], n_classes: usize, p_pos: Option<&[f64]>) -> Result<Self> {
        let (macro_f1, _) = macro_f1_multiclass(labels, preds, n_classes)?;
        let auc = match p_pos {
            Some(p) => auc(labels, p).ok(),
            None => None,
        };
        Ok(Self {
            acc: accuracy(labels, preds)?,
            macro_f1,
            auc,
        })
    }

    /// Higher macro-F1 wins, then higher AUC. Equal scores are not better,
    /// so the earlier epoch is kept.
    pub fn better_than(&self, other: &EvalSummary) -> bool {
        if self.macro_f1 != other.macro_f1 {
            return self.macro_f1 > other.macro_f1;
        }
        self.auc.unwrap_or(f64::NEG_INFINITY) > other.auc.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    /// Checksum of the returned parameters.
    pub checksum: u64,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.mean_loss)
    }
}

/// Per-item loss callback: `(params, epoch, item, grads) -> loss`. The
/// callback accumulates the item's gradient into `grads`.
pub type SampleFn<'a> = dyn FnMut(&ParamStore, usize, usize, &mut Gradients) -> Result<f64> + 'a;
pub type ValidateFn<'a> = dyn FnMut(&ParamStore) -> Result<Option<EvalSummary>> + 'a;

/// Runs shuffled minibatch training and leaves the best validated
/// parameters in `store` (or the final ones without validation).
pub fn fit(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    n_items: usize,
    order_rng: &mut ChaCha8Rng,
    sample: &mut SampleFn<'_>,
    validate: &mut ValidateFn<'_>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Degenerate("empty training set".into()));
    }
    let steps_per_epoch = n_items.div_ceil(cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(usize::MAX).min(steps_per_epoch * cfg.epochs);
    let mut schedule = CosineSchedule::new(cfg.learning_rate, total);
    schedule.warmup_steps = cfg.warmup_steps;
    let mut opt = Optimizer::new(cfg.optimizer_kind(), cfg.weight_decay, store);
    let mut log = TrainingLog::default();
    let mut best: Option<(EvalSummary, ParamStore)> = None;
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut grads = Gradients::new(store);
    let mut item_grads = Gradients::new(store);

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(order_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if log.steps >= total {
                break;
            }
            grads.clear();
            for &item in batch {
                item_grads.clear();
                let loss = sample(store, epoch, item, &mut item_grads)?;
                if !loss.is_finite() || !item_grads.all_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch} step {} item {item}: loss {loss}",
                        log.steps
                    )));
                }
                grads.merge(&item_grads);
                loss_sum += loss;
                seen += 1;
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(store, &grads, schedule.lr(log.steps));
            log.steps += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let val = validate(store)?;
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(b, _)| v.better_than(b)) {
                best = Some((v, store.clone()));
                log.best_epoch = Some(epoch);
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / seen as f64,
            val,
        });
        if log.steps >= total {
            break;
        }
    }
    if let Some((_, snapshot)) = best {
        *store = snapshot;
    }
    log.checksum = store.checksum();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use sourceaware_nn::{Graph, Linear};

    #[test]
    fn selection_prefers_f1_then_auc_then_earlier() {
        let a = EvalSummary {
            acc: 0.9,
            macro_f1: 0.8,
            auc: Some(0.9),
        };
        let b = EvalSummary { auc: Some(0.95), ..a };
        assert!(b.better_than(&a));
        assert!(!a.better_than(&a));
        let c = EvalSummary { macro_f1: 0.81, auc: None, ..a };
        assert!(c.better_than(&b));
    }

    #[test]
    fn fits_separable_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "head", "head", 2, 2, &mut rng);
        let xs = [[1.0, 0.5], [0.8, 1.0], [-1.0, -0.3], [-0.7, -1.0]];
        let ys = [1usize, 1, 0, 0];
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 2,
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut sample = |s: &ParamStore, _e: usize, i: usize, grads: &mut Gradients| {
            let mut g = Graph::new(s);
            let x = g.input(sourceaware_nn::Tensor::row(xs[i].to_vec()));
            let z = lin.forward(&mut g, x);
            let l = g.cross_entropy(z, ys[i]);
            g.backward_into(l, grads);
            Ok(g.scalar(l))
        };
        let log = fit(&mut store, &cfg, 4, &mut rng, &mut sample, &mut |_| Ok(None)).unwrap();
        assert!(log.final_loss().unwrap() < 0.05);
    }

    #[test]
    fn nan_loss_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let _ = Linear::new(&mut store, "head", "head", 2, 2, &mut rng);
        let cfg = TrainConfig::default();
        let err = fit(
            &mut store,
            &cfg,
            3,
            &mut rng,
            &mut |_, _, _, _| Ok(f64::NAN),
            &mut |_| Ok(None),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
    }
}
