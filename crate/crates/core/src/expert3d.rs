//! Stage 1: residual 3D CNN over canonical volumes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sourceaware_nn::{softmax, Conv3d, Gradients, Graph, Linear, ParamStore, Tensor, Var};

use crate::dataset::{volume_input, LabeledScan, ViewStore};
use crate::error::{Error, Result};
use crate::predictions::{ExpertPrediction, Stage};
use crate::prep::{
    adaptive_avg_pool3d, augment_scan_observed, canonicalize_3d, sample_augment_params, AugmentBounds,
    AugmentParams, CanonicalVolume3D, ScanView,
};
use crate::rng::substream;
use crate::train::{fit, EvalSummary, TrainConfig, TrainingLog};
use crate::volume::Volume;

/// Numerically stable `-log softmax(logits)[label]`.
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    if logits.iter().any(|z| z.is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} for {} logits", logits.len())));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backbone3DConfig {
    /// Model input shape; canonical volumes are average-pooled to it.
    pub input_dims: [usize; 3],
    /// Channel width of each stage. Every stage halves the resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub kernel: usize,
}

impl Default for Backbone3DConfig {
    fn default() -> Self {
        Self {
            input_dims: [16, 32, 32],
            widths: vec![8, 12, 16, 24],
            blocks_per_stage: 1,
            kernel: 3,
        }
    }
}

impl Backbone3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("backbone needs nonzero widths and an odd kernel".into()));
        }
        if self.input_dims.contains(&0) {
            return Err(Error::InvalidArgument("backbone input dims must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.iter().sum()
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv3d,
    conv2: Conv3d,
}

#[derive(Clone, Debug)]
struct BackboneStage {
    down: Conv3d,
    blocks: Vec<ResBlock>,
}

/// Stride-2 convolution per stage followed by residual blocks. Features are
/// the global average pools of every stage output, concatenated.
#[derive(Clone, Debug)]
pub struct Backbone3D {
    pub config: Backbone3DConfig,
    stages: Vec<BackboneStage>,
}

impl Backbone3D {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &Backbone3DConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            let name = format!("backbone.stage{i}");
            let down = Conv3d::new(store, &format!("{name}.down"), "backbone", in_ch, w, k, 2, rng);
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let bn = format!("{name}.block{b}");
                let conv1 = Conv3d::new(store, &format!("{bn}.conv1"), "backbone", w, w, k, 1, rng);
                let conv2 = Conv3d::new(store, &format!("{bn}.conv2"), "backbone", w, w, k, 1, rng);
                conv2.scale_weights(store, 0.1);
                blocks.push(ResBlock { conv1, conv2 });
            }
            stages.push(BackboneStage { down, blocks });
            in_ch = w;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// `x` is `[1, D, H, W]`; returns `[1, feature_dim]`.
    pub fn features(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        let mut pooled = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            h = st.down.forward(g, h);
            h = g.relu(h);
            for b in &st.blocks {
                let r = b.conv1.forward(g, h);
                let r = g.relu(r);
                let r = b.conv2.forward(g, r);
                let s = g.add(h, r);
                h = g.relu(s);
            }
            pooled.push(g.global_avg_pool(h));
        }
        g.concat_cols(&pooled)
    }
}

/// Checks a pooled input against the model's expected dims.
pub(crate) fn check_dims(v: &Volume, dims: [usize; 3]) -> Result<()> {
    if v.dims() != dims {
        return Err(Error::ShapeMismatch {
            expected: format!("{dims:?}"),
            got: format!("{:?}", v.dims()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Volume3DModel {
    pub store: ParamStore,
    pub backbone: Backbone3D,
    pub head: Linear,
}

impl Volume3DModel {
    /// Random backbone, zero-initialized binary head.
    pub fn new<R: Rng + ?Sized>(config: &Backbone3DConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone3D::new(&mut store, config, rng)?;
        let head = Linear::zeros(&mut store, "head", "head", config.feature_dim(), 2);
        Ok(Self { store, backbone, head })
    }

    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let f = self.backbone.features(g, x);
        self.head.forward(g, f)
    }

    /// Class probabilities for an input already pooled to `input_dims`.
    pub fn probs(&self, pooled: &Volume) -> Result<[f64; 2]> {
        check_dims(pooled, self.backbone.config.input_dims)?;
        let mut g = Graph::new(&self.store);
        let x = g.input(volume_input(pooled));
        let z = self.logits(&mut g, x);
        let p = softmax(g.value(z).data());
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stage 1 probabilities".into()));
        }
        Ok([p[0], p[1]])
    }

    /// Loss for one example; accumulates gradients into `grads`.
    pub fn loss_and_grad(&self, pooled: &Volume, label: usize, grads: &mut Gradients) -> Result<f64> {
        check_dims(pooled, self.backbone.config.input_dims)?;
        let mut g = Graph::new(&self.store);
        let x = g.input(volume_input(pooled));
        let z = self.logits(&mut g, x);
        let l = g.cross_entropy(z, label);
        g.backward_into(l, grads);
        Ok(g.scalar(l))
    }
}

/// Inference on a canonical volume. No augmentation is applied.
pub fn predict_3d(model: &Volume3DModel, volume: &CanonicalVolume3D, scan_id: &str, variant: &str) -> Result<ExpertPrediction> {
    let pooled = adaptive_avg_pool3d(volume.volume(), model.backbone.config.input_dims);
    ExpertPrediction::new(scan_id, model.probs(&pooled)?, Stage::Volume3D, variant)
}

/// Input settings for Stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSetting {
    Lung,
    LungRot,
    OrigLung,
    Orig,
}

impl InputSetting {
    pub const ALL: [InputSetting; 4] = [
        InputSetting::Lung,
        InputSetting::LungRot,
        InputSetting::OrigLung,
        InputSetting::Orig,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputSetting::Lung => "lung",
            InputSetting::LungRot => "lung_rot",
            InputSetting::OrigLung => "orig_lung",
            InputSetting::Orig => "orig",
        }
    }

    /// Views in the training mix; inference averages over the same views.
    pub fn views(self) -> &'static [ScanView] {
        match self {
            InputSetting::Lung | InputSetting::LungRot => &[ScanView::Lung],
            InputSetting::OrigLung => &[ScanView::Orig, ScanView::Lung],
            InputSetting::Orig => &[ScanView::Orig],
        }
    }

    pub fn rotates(self) -> bool {
        self == InputSetting::LungRot
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub backbone: Backbone3DConfig,
    pub train: TrainConfig,
    pub setting: InputSetting,
    pub augment: AugmentBounds,
    /// Chance that a training example is augmented in a given epoch.
    pub augment_probability: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            backbone: Backbone3DConfig::default(),
            train: TrainConfig {
                epochs: 8,
                batch_size: 8,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            setting: InputSetting::OrigLung,
            augment: AugmentBounds::default(),
            augment_probability: 0.5,
        }
    }
}

/// One augmentation callback seen during training.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentEvent {
    pub epoch: usize,
    pub scan_id: String,
    pub view: ScanView,
    pub slice: usize,
    pub params: AugmentParams,
}

/// Average of per-view probabilities under `setting`.
pub fn predict_stage1(
    model: &Volume3DModel,
    setting: InputSetting,
    views: &dyn ViewStore,
    scan_id: &str,
    variant: &str,
) -> Result<ExpertPrediction> {
    let dims = model.backbone.config.input_dims;
    let vs = setting.views();
    let mut acc = [0.0; 2];
    for &view in vs {
        let p = model.probs(&views.stem3d(scan_id, view, dims)?)?;
        acc[0] += p[0];
        acc[1] += p[1];
    }
    let n = vs.len() as f64;
    ExpertPrediction::new(scan_id, [acc[0] / n, acc[1] / n], Stage::Volume3D, variant)
}

pub fn train_stage1(
    views: &dyn ViewStore,
    train: &[LabeledScan],
    val: &[LabeledScan],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<(Volume3DModel, TrainingLog)> {
    train_stage1_observed(views, train, val, cfg, seed, &mut |_| {})
}

/// As [`train_stage1`], reporting every augmented slice to `observer`.
pub fn train_stage1_observed(
    views: &dyn ViewStore,
    train: &[LabeledScan],
    val: &[LabeledScan],
    cfg: &Stage1Config,
    seed: u64,
    observer: &mut dyn FnMut(&AugmentEvent),
) -> Result<(Volume3DModel, TrainingLog)> {
    cfg.augment.validate()?;
    if !(0.0..=1.0).contains(&cfg.augment_probability) {
        return Err(Error::InvalidArgument("augment_probability must be in [0, 1]".into()));
    }
    let setting = cfg.setting;
    let bounds = if setting.rotates() {
        cfg.augment
    } else {
        cfg.augment.without_rotation()
    };
    let items: Vec<(usize, ScanView)> = (0..train.len())
        .flat_map(|i| setting.views().iter().map(move |&v| (i, v)))
        .collect();
    let mut model = Volume3DModel::new(&cfg.backbone, &mut substream(seed, &["stage1", "init"]))?;
    let dims = cfg.backbone.input_dims;
    let val_labels: Vec<usize> = val.iter().map(|s| s.label.index()).collect();
    let mut val_inputs = Vec::with_capacity(val.len());
    for s in val {
        let mut per_view = Vec::new();
        for &v in setting.views() {
            per_view.push(views.stem3d(&s.scan_id, v, dims)?);
        }
        val_inputs.push(per_view);
    }

    let mut sample = |store: &ParamStore, epoch: usize, item: usize, grads: &mut Gradients| -> Result<f64> {
        let (i, view) = items[item];
        let scan = &train[i];
        let mut rng = substream(seed, &["stage1", "augment", &epoch.to_string(), &scan.scan_id, view.as_str()]);
        let pooled = if rng.random_bool(cfg.augment_probability) {
            let canonical = canonicalize_3d(&views.prepared(&scan.scan_id, view)?)?;
            let params = sample_augment_params(&mut rng, &bounds, canonical.volume().dims());
            let mut log = |slice: usize, p: &AugmentParams| {
                observer(&AugmentEvent {
                    epoch,
                    scan_id: scan.scan_id.clone(),
                    view,
                    slice,
                    params: *p,
                })
            };
            let augmented = augment_scan_observed(&canonical, &params, &mut log)?;
            adaptive_avg_pool3d(augmented.volume(), dims)
        } else {
            views.stem3d(&scan.scan_id, view, dims)?
        };
        let m = ModelRef { store, model: &model };
        m.loss_and_grad(&pooled, scan.label.index(), grads)
    };
    let mut validate = |store: &ParamStore| -> Result<Option<EvalSummary>> {
        if val.is_empty() {
            return Ok(None);
        }
        let m = ModelRef { store, model: &model };
        let mut p = Vec::with_capacity(val.len());
        for inputs in &val_inputs {
            let mut acc = 0.0;
            for x in inputs {
                acc += m.probs(x)?[1];
            }
            p.push(acc / inputs.len() as f64);
        }
        EvalSummary::binary(&val_labels, &p).map(Some)
    };
    let mut store = model.store.clone();
    let log = fit(
        &mut store,
        &cfg.train,
        items.len(),
        &mut substream(seed, &["stage1", "order"]),
        &mut sample,
        &mut validate,
    )?;
    model.store = store;
    Ok((model, log))
}

/// A model structure evaluated against an external parameter store.
pub(crate) struct ModelRef<'a> {
    pub store: &'a ParamStore,
    pub model: &'a Volume3DModel,
}

impl ModelRef<'_> {
    fn probs(&self, pooled: &Volume) -> Result<[f64; 2]> {
        let mut g = Graph::new(self.store);
        let x = g.input(volume_input(pooled));
        let z = self.model.logits(&mut g, x);
        let p = softmax(g.value(z).data());
        Ok([p[0], p[1]])
    }

    fn loss_and_grad(&self, pooled: &Volume, label: usize, grads: &mut Gradients) -> Result<f64> {
        check_dims(pooled, self.model.backbone.config.input_dims)?;
        let mut g = Graph::new(self.store);
        let x = g.input(volume_input(pooled));
        let z = self.model.logits(&mut g, x);
        let l = g.cross_entropy(z, label);
        g.backward_into(l, grads);
        Ok(g.scalar(l))
    }
}

/// Logits of an input tensor; used by gradient checks.
pub fn logits_of(model: &Volume3DModel, store: &ParamStore, input: &Tensor) -> Vec<f64> {
    let mut g = Graph::new(store);
    let x = g.input(input.clone());
    let z = model.logits(&mut g, x);
    g.value(z).data().to_vec()
}
