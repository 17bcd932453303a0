//! Stage 3 source classifier on top of a frozen Stage 1 backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sourceaware_nn::{softmax, Gradients, Graph, Linear, ParamId, ParamStore, Tensor, Var};

use crate::dataset::{volume_input, LabeledScan, ViewStore};
use crate::error::{Error, Result};
use crate::expert3d::{check_dims, Backbone3D, Volume3DModel};
use crate::metrics::{accuracy, macro_f1_multiclass};
use crate::predictions::SourcePrediction;
use crate::prep::{adaptive_avg_pool3d, CanonicalVolume3D, ScanView};
use crate::rng::substream;
use crate::train::{fit, EvalSummary, TrainConfig, TrainingLog};
use crate::volume::{Label, Volume};

pub const NUM_SOURCES: usize = 4;

#[derive(Clone, Debug)]
pub struct SourceModel {
    pub store: ParamStore,
    pub backbone: Backbone3D,
    /// Fixed feature standardization, set from training features.
    shift: ParamId,
    scale: ParamId,
    pub head: Linear,
}

/// Copies the Stage 1 backbone, freezes it and attaches a zero 4-class head.
pub fn build_source_clf(stage1: &Volume3DModel) -> Result<SourceModel> {
    let mut store = ParamStore::new();
    // initial values are overwritten by the copy below
    let backbone = Backbone3D::new(&mut store, &stage1.backbone.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let copied = store.load_matching(&stage1.store)?;
    if copied != store.len() {
        return Err(Error::MissingPrerequisite(format!(
            "stage 1 checkpoint provides {copied} of {} backbone parameters",
            store.len()
        )));
    }
    store.set_all_trainable(false);
    let d = backbone.config.feature_dim();
    let shift = store.add("source.norm.shift", "norm", Tensor::zeros(&[d]));
    let scale = store.add("source.norm.scale", "norm", Tensor::full(&[d], 1.0));
    store.set_trainable(shift, false);
    store.set_trainable(scale, false);
    let head = Linear::zeros(&mut store, "source.head", "head", d, NUM_SOURCES);
    Ok(SourceModel {
        store,
        backbone,
        shift,
        scale,
        head,
    })
}

impl SourceModel {
    /// Frozen backbone features of a pooled input, `[feature_dim]`.
    pub fn features(&self, pooled: &Volume) -> Result<Tensor> {
        check_dims(pooled, self.backbone.config.input_dims)?;
        let mut g = Graph::new(&self.store);
        let x = g.input(volume_input(pooled));
        let f = self.backbone.features(&mut g, x);
        Ok(g.value(f).clone())
    }

    fn logits_from_features(&self, g: &mut Graph<'_>, f: &Tensor) -> Var {
        let x = g.input(f.clone());
        let sh = g.param(self.shift);
        let x = g.add_row(x, sh);
        let sc = g.param(self.scale);
        let x = g.mul_row(x, sc);
        self.head.forward(g, x)
    }

    fn probs_with(&self, store: &ParamStore, f: &Tensor) -> Result<[f64; 4]> {
        let mut g = Graph::new(store);
        let z = self.logits_from_features(&mut g, f);
        let p = softmax(g.value(z).data());
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("source probabilities".into()));
        }
        Ok([p[0], p[1], p[2], p[3]])
    }

    pub fn probs(&self, pooled: &Volume) -> Result<[f64; 4]> {
        self.probs_with(&self.store, &self.features(pooled)?)
    }

    /// Sets the standardization from per-dimension mean and spread.
    pub fn fit_normalization(&mut self, feats: &[Tensor]) -> Result<()> {
        if feats.is_empty() {
            return Err(Error::Degenerate("no features to normalize".into()));
        }
        let d = feats[0].len();
        let n = feats.len() as f64;
        let mut mean = vec![0.0; d];
        for f in feats {
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in feats {
            for ((s, v), m) in var.iter_mut().zip(f.data()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let sh = self.store.value_mut(self.shift).data_mut();
        for (s, m) in sh.iter_mut().zip(&mean) {
            *s = -m;
        }
        let sc = self.store.value_mut(self.scale).data_mut();
        for (s, v) in sc.iter_mut().zip(&var) {
            *s = 1.0 / (v.sqrt() + 1e-6);
        }
        Ok(())
    }

    /// Cross-entropy on cached features; accumulates head gradients.
    pub fn loss_and_grad(&self, store: &ParamStore, f: &Tensor, source: usize, grads: &mut Gradients) -> f64 {
        let mut g = Graph::new(store);
        let z = self.logits_from_features(&mut g, f);
        let l = g.cross_entropy(z, source);
        g.backward_into(l, grads);
        g.scalar(l)
    }
}

pub fn predict_source(model: &SourceModel, volume: &CanonicalVolume3D, scan_id: &str) -> Result<SourcePrediction> {
    let pooled = adaptive_avg_pool3d(volume.volume(), model.backbone.config.input_dims);
    SourcePrediction::from_probs(scan_id, model.probs(&pooled)?)
}

pub fn predict_source_scan(model: &SourceModel, view: ScanView, views: &dyn ViewStore, scan_id: &str) -> Result<SourcePrediction> {
    let pooled = views.stem3d(scan_id, view, model.backbone.config.input_dims)?;
    SourcePrediction::from_probs(scan_id, model.probs(&pooled)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub train: TrainConfig,
    pub view: ScanView,
    /// Adds train-split source 2 COVID scans to validation.
    pub augment_val_with_s2_positives: bool,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 40,
                batch_size: 16,
                learning_rate: 0.05,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
            view: ScanView::Orig,
            augment_val_with_s2_positives: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub acc: f64,
    pub macro_f1: f64,
    pub n: usize,
}

/// Validation scans for source classification.
pub fn source_validation_set(train: &[LabeledScan], val: &[LabeledScan], with_s2_positives: bool) -> Vec<LabeledScan> {
    let mut out = val.to_vec();
    if with_s2_positives {
        out.extend(
            train
                .iter()
                .filter(|s| s.source.map(|x| x.index()) == Some(2) && s.label == Label::Covid)
                .cloned(),
        );
    }
    out
}

fn source_labels(scans: &[LabeledScan]) -> Result<Vec<usize>> {
    scans
        .iter()
        .map(|s| {
            s.source
                .map(|x| x.index())
                .ok_or_else(|| Error::InvalidArgument(format!("scan {} has no source label", s.scan_id)))
        })
        .collect()
}

pub fn evaluate_sources(labels: &[usize], preds: &[usize]) -> Result<SourceMetrics> {
    Ok(SourceMetrics {
        acc: accuracy(labels, preds)?,
        macro_f1: macro_f1_multiclass(labels, preds, NUM_SOURCES)?.0,
        n: labels.len(),
    })
}

/// Trains the source head. Returns the model, its log and validation metrics.
pub fn train_source_clf(
    stage1: &Volume3DModel,
    views: &dyn ViewStore,
    train: &[LabeledScan],
    val: &[LabeledScan],
    cfg: &Stage3Config,
    seed: u64,
) -> Result<(SourceModel, TrainingLog, Option<SourceMetrics>)> {
    let mut model = build_source_clf(stage1)?;
    let labels = source_labels(train)?;
    for s in 0..NUM_SOURCES {
        if !labels.contains(&s) {
            return Err(Error::Degenerate(format!("source {s} is absent from the stage 3 training set")));
        }
    }
    let dims = model.backbone.config.input_dims;
    let feats = |scans: &[LabeledScan]| -> Result<Vec<Tensor>> {
        scans.iter().map(|s| model.features(&views.stem3d(&s.scan_id, cfg.view, dims)?)).collect()
    };
    let train_feats = feats(train)?;
    let val_scans = source_validation_set(train, val, cfg.augment_val_with_s2_positives);
    let val_feats = feats(&val_scans)?;
    let val_labels = source_labels(&val_scans)?;
    model.fit_normalization(&train_feats)?;
    let log = fit_source_head(&mut model, &train_feats, &labels, &val_feats, &val_labels, &cfg.train, seed)?;
    let metrics = if val_scans.is_empty() {
        None
    } else {
        let preds = val_feats
            .iter()
            .map(|f| Ok(SourcePrediction::from_probs("v", model.probs_with(&model.store, f)?)?.predicted_source.index()))
            .collect::<Result<Vec<_>>>()?;
        Some(evaluate_sources(&val_labels, &preds)?)
    };
    Ok((model, log, metrics))
}

/// Head-only training on precomputed features.
pub fn fit_source_head(
    model: &mut SourceModel,
    train_feats: &[Tensor],
    labels: &[usize],
    val_feats: &[Tensor],
    val_labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingLog> {
    let m = model.clone();
    let mut sample = |store: &ParamStore, _e: usize, i: usize, grads: &mut Gradients| -> Result<f64> {
        Ok(m.loss_and_grad(store, &train_feats[i], labels[i], grads))
    };
    let mut validate = |store: &ParamStore| -> Result<Option<EvalSummary>> {
        if val_feats.is_empty() {
            return Ok(None);
        }
        let preds = val_feats
            .iter()
            .map(|f| Ok(SourcePrediction::from_probs("v", m.probs_with(store, f)?)?.predicted_source.index()))
            .collect::<Result<Vec<_>>>()?;
        EvalSummary::from_predictions(val_labels, &preds, NUM_SOURCES, None).map(Some)
    };
    fit(
        &mut model.store,
        cfg,
        train_feats.len(),
        &mut substream(seed, &["stage3", "order"]),
        &mut sample,
        &mut validate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert3d::Backbone3DConfig;

    fn tiny() -> Volume3DModel {
        let cfg = Backbone3DConfig {
            input_dims: [8, 8, 8],
            widths: vec![2, 3],
            ..Default::default()
        };
        Volume3DModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn head_only_and_uniform_start() {
        let m = build_source_clf(&tiny()).unwrap();
        let names = m.store.trainable_names();
        assert_eq!(names, vec!["source.head.weight", "source.head.bias"]);
        let v = Volume::from_fn([8, 8, 8], |z, y, x| ((z * 3 + y + x) % 5) as f32 / 5.0);
        let p = m.probs(&v).unwrap();
        assert_eq!(p, [0.25; 4]);
        let pred = SourcePrediction::from_probs("a", p).unwrap();
        assert_eq!(pred.predicted_source.index(), 0);
        assert!(m.probs(&Volume::zeros([4, 8, 8])).is_err());
    }

    #[test]
    fn s2_positive_validation_augmentation() {
        let s = |id: &str, src: u8, label| LabeledScan {
            scan_id: id.into(),
            label,
            source: Some(crate::volume::SourceId::new(src).unwrap()),
        };
        let train = vec![s("a", 2, Label::Covid), s("b", 2, Label::NonCovid), s("c", 1, Label::Covid)];
        let val = vec![s("d", 0, Label::Covid)];
        let v = source_validation_set(&train, &val, true);
        assert_eq!(v.iter().map(|x| x.scan_id.as_str()).collect::<Vec<_>>(), ["d", "a"]);
        assert_eq!(source_validation_set(&train, &val, false).len(), 1);
    }
}
