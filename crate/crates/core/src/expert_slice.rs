//! Stage 2a: slice encoder with per-slice head, trained on the mean of
//! per-slice probabilities over sampled slice subsets.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sourceaware_nn::{Gradients, Graph, Linear, ParamId, ParamStore, Tensor, TransformerBlock, Var};

use crate::dataset::{patch_tokens, LabeledScan, SliceResolution, ViewStore};
use crate::error::{Error, Result};
use crate::predictions::{ExpertPrediction, Stage};
use crate::prep::{
    canonicalize_2d, extract_lung_with, linear_taps, trim_slices, trimmed_range, PrepConfig, ScanView, SliceStack2D,
};
use crate::rng::substream;
use crate::synth::{generate_scan, SynthConfig};
use crate::train::{fit, EvalSummary, TrainConfig, TrainingLog};
use crate::volume::{Label, SourceId, Volume};

/// Clamp applied to the mean true-class probability before the log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceEncoderConfig {
    /// Slices are average-pooled to `grid x grid` before patching.
    pub grid: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Transformer blocks after the patch embedding.
    pub blocks: usize,
}

impl Default for SliceEncoderConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            patch: 8,
            dim: 32,
            heads: 4,
            ff_mult: 4,
            blocks: 3,
        }
    }
}

impl SliceEncoderConfig {
    pub fn tokens(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.grid % self.patch != 0 {
            return Err(Error::InvalidArgument(format!("grid {} not divisible by patch {}", self.grid, self.patch)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument("dim must split across heads and blocks must be > 0".into()));
        }
        Ok(())
    }
}

/// Ordered layers: layer 0 is the patch embedding, layers `1..=blocks` are
/// Transformer blocks. The embedding is the token mean of the last layer.
#[derive(Clone, Debug)]
pub struct SliceEncoder {
    pub config: SliceEncoderConfig,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
}

impl SliceEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &SliceEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.dim;
        let embed = Linear::new(store, "encoder.layer0.embed", "encoder", config.patch * config.patch, e, rng);
        let pos_init: Vec<f64> = (0..config.tokens() * e).map(|_| rng.random_range(-0.02..0.02)).collect();
        let pos = store.add("encoder.layer0.pos", "encoder", Tensor::from_vec(&[config.tokens(), e], pos_init)?);
        let blocks = (1..=config.blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.layer{i}"),
                    "encoder",
                    e,
                    config.heads,
                    config.ff_mult * e,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            pos,
            blocks,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn layer_prefix(i: usize) -> String {
        format!("encoder.layer{i}.")
    }

    pub fn set_layer_trainable(&self, store: &mut ParamStore, layer: usize, trainable: bool) -> Result<()> {
        if layer >= self.num_layers() {
            return Err(Error::InvalidArgument(format!("encoder has no layer {layer}")));
        }
        store.set_trainable_prefix(&Self::layer_prefix(layer), trainable);
        Ok(())
    }

    /// Per-layer flag: true when every parameter of the layer is trainable.
    pub fn layer_trainability(&self, store: &ParamStore) -> Vec<bool> {
        (0..self.num_layers())
            .map(|i| {
                let p = Self::layer_prefix(i);
                store.iter().filter(|(_, q)| q.name.starts_with(&p)).all(|(_, q)| q.trainable)
            })
            .collect()
    }

    /// First layer index whose parameters train; `num_layers()` when frozen.
    pub fn first_trainable_layer(&self, store: &ParamStore) -> usize {
        (0..self.num_layers())
            .find(|&i| {
                let p = Self::layer_prefix(i);
                store.iter().any(|(_, q)| q.name.starts_with(&p) && q.trainable)
            })
            .unwrap_or(self.num_layers())
    }

    /// Applies layers `from..to`. Layer 0 takes `[tokens, patch^2]` input;
    /// later layers take `[tokens, dim]` hidden states.
    pub fn forward_range(&self, g: &mut Graph<'_>, mut h: Var, from: usize, to: usize) -> Var {
        for layer in from..to {
            h = if layer == 0 {
                let e = self.embed.forward(g, h);
                let p = g.param(self.pos);
                g.add(e, p)
            } else {
                self.blocks[layer - 1].forward(g, h)
            };
        }
        h
    }

    /// `[1, dim]` embedding of one tokenized slice.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: Var) -> Var {
        let h = self.forward_range(g, tokens, 0, self.num_layers());
        g.mean_rows(h)
    }

    /// Hidden state after `upto` layers, computed without gradients.
    pub fn prefix(&self, store: &ParamStore, tokens: &Tensor, upto: usize) -> Tensor {
        let mut g = Graph::new(store);
        let x = g.input(tokens.clone());
        let h = self.forward_range(&mut g, x, 0, upto);
        g.value(h).clone()
    }
}

/// Slice sampling used in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `k` consecutive slices from a uniform start offset.
    Contiguous,
    /// `k` distinct slices chosen uniformly, in ascending order.
    DepthRandom,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Contiguous => "crs",
            SamplingMode::DepthRandom => "drs",
        }
    }
}

/// Draws slice indices for one training pass over an `n`-slice stack.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, k: usize, mode: SamplingMode, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot sample {k} of {n} slices")));
    }
    Ok(match mode {
        SamplingMode::Contiguous => {
            let tau = rng.random_range(0..=n - k);
            (tau..tau + k).collect()
        }
        SamplingMode::DepthRandom => {
            let mut idx = index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// Consecutive slices `start_offset..start_offset + k` of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSubsequence {
    pub start_offset: usize,
    pub slices: Volume,
}

pub fn sample_contiguous<R: Rng + ?Sized>(stack: &SliceStack2D, k: usize, rng: &mut R) -> Result<SliceSubsequence> {
    let n = stack.volume().slices();
    let idx = sample_indices(n, k, SamplingMode::Contiguous, rng)?;
    Ok(SliceSubsequence {
        start_offset: idx[0],
        slices: stack.volume().slice_range(idx[0], idx[0] + k)?,
    })
}

/// `-ln(max(mean_prob[label], eps))`.
pub fn loss_slice(scan_prob: [f64; 2], label: usize) -> Result<f64> {
    if scan_prob.iter().any(|p| !p.is_finite()) || label > 1 {
        return Err(Error::InvalidArgument(format!("invalid probabilities {scan_prob:?} or label {label}")));
    }
    Ok(-scan_prob[label].max(PROB_EPS).ln())
}

#[derive(Clone, Debug)]
pub struct SliceModel {
    pub store: ParamStore,
    pub encoder: SliceEncoder,
    pub head: Linear,
}

impl SliceModel {
    /// Random encoder, zero-initialized head.
    pub fn new<R: Rng + ?Sized>(config: &SliceEncoderConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = SliceEncoder::new(&mut store, config, rng)?;
        let head = Linear::zeros(&mut store, "head", "head", config.dim, 2);
        Ok(Self { store, encoder, head })
    }

    /// Tokenizes every slice of a pooled stack.
    pub fn tokens(&self, pooled: &Volume) -> Result<Vec<Tensor>> {
        let g = self.encoder.config.grid;
        if pooled.dims()[1..] != [g, g] {
            return Err(Error::ShapeMismatch {
                expected: format!("slices of {g}x{g}"),
                got: format!("{:?}", pooled.dims()),
            });
        }
        (0..pooled.slices())
            .map(|z| patch_tokens(pooled.slice(z), g, self.encoder.config.patch))
            .collect()
    }

    /// `[K, 2]` per-slice probabilities for hidden states after `from` layers.
    fn slice_probs(&self, g: &mut Graph<'_>, hidden: &[Tensor], from: usize) -> Var {
        let rows: Vec<Var> = hidden
            .iter()
            .map(|h| {
                let x = g.input(h.clone());
                let h = self.encoder.forward_range(g, x, from, self.encoder.num_layers());
                let e = g.mean_rows(h);
                let z = self.head.forward(g, e);
                g.softmax_rows(z)
            })
            .collect();
        g.concat_rows(&rows)
    }

    /// Per-slice probabilities, one row per slice.
    pub fn per_slice_probs(&self, slices: &[Tensor]) -> Result<Vec<[f64; 2]>> {
        per_slice_probs_with(self, &self.store, slices)
    }

    /// Mean of per-slice probabilities.
    pub fn scan_probability(&self, slices: &[Tensor]) -> Result<[f64; 2]> {
        mean_probs(&self.per_slice_probs(slices)?)
    }
}

fn per_slice_probs_with(model: &SliceModel, store: &ParamStore, slices: &[Tensor]) -> Result<Vec<[f64; 2]>> {
    let mut g = Graph::new(store);
    let p = model.slice_probs(&mut g, slices, 0);
    let v = g.value(p);
    if !v.all_finite() {
        return Err(Error::NonFinite("slice probabilities".into()));
    }
    Ok(v.data().chunks(2).map(|c| [c[0], c[1]]).collect())
}

pub fn mean_probs(rows: &[[f64; 2]]) -> Result<[f64; 2]> {
    if rows.is_empty() {
        return Err(Error::Degenerate("no slices".into()));
    }
    let n = rows.len() as f64;
    Ok([
        rows.iter().map(|r| r[0]).sum::<f64>() / n,
        rows.iter().map(|r| r[1]).sum::<f64>() / n,
    ])
}

/// Slice-mean loss and its gradient. `hidden` holds states after `from`
/// encoder layers (tokens when `from == 0`).
pub fn slice_loss_and_grad(
    model: &SliceModel,
    store: &ParamStore,
    hidden: &[Tensor],
    from: usize,
    label: usize,
    grads: &mut Gradients,
) -> f64 {
    let mut g = Graph::new(store);
    let p = model.slice_probs(&mut g, hidden, from);
    let mean = g.mean_rows(p);
    let l = g.nll_prob(mean, label, PROB_EPS);
    g.backward_into(l, grads);
    g.scalar(l)
}

/// Inference over every slice of a canonical stack.
pub fn predict_stage2a(model: &SliceModel, stack: &SliceStack2D, scan_id: &str, variant: &str) -> Result<ExpertPrediction> {
    let pooled = crate::dataset::pool_slices(stack.volume(), model.encoder.config.grid);
    let probs = model.scan_probability(&model.tokens(&pooled)?)?;
    ExpertPrediction::new(scan_id, probs, Stage::Slice, variant)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    /// Synthetic scans in the warm-up corpus (independent of the dataset).
    pub scans: usize,
    pub train: TrainConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            scans: 16,
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2aConfig {
    pub encoder: SliceEncoderConfig,
    pub train: TrainConfig,
    pub sampling: SamplingMode,
    pub k: usize,
    pub resolution: SliceResolution,
    pub view: ScanView,
    /// When false only the head trains.
    pub train_encoder: bool,
    pub warmup: WarmupConfig,
}

impl Default for Stage2aConfig {
    fn default() -> Self {
        Self {
            encoder: SliceEncoderConfig::default(),
            train: TrainConfig {
                epochs: 8,
                batch_size: 8,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            sampling: SamplingMode::Contiguous,
            k: 12,
            resolution: SliceResolution::Res24x448,
            view: ScanView::Lung,
            train_encoder: true,
            warmup: WarmupConfig::default(),
        }
    }
}

/// Tokenized canonical slices of independent synthetic scans, labeled by
/// whether a lesion crosses each slice.
pub fn warmup_corpus(
    synth: &SynthConfig,
    prep: &PrepConfig,
    view: ScanView,
    encoder: &SliceEncoderConfig,
    scans: usize,
    seed: u64,
) -> Result<Vec<(Tensor, usize)>> {
    let mut out = Vec::new();
    for i in 0..scans {
        let mut rng = substream(seed, &["warmup", &i.to_string()]);
        let source = SourceId::new((i % 4) as u8)?;
        let label = if i % 2 == 0 { Label::Covid } else { Label::NonCovid };
        let g = generate_scan(&synth.profiles[source.index()], label, &synth.lesions[source.index()], &mut rng)?;
        let flags = g.lesion_slices();
        let (start, end) = trimmed_range(flags.len(), prep.slice_threshold, prep.trim_fraction);
        let trimmed = trim_slices(&g.scan, prep.slice_threshold, prep.trim_fraction)?;
        let mut flags = flags[start..end].to_vec();
        let scan = match view {
            ScanView::Orig => trimmed,
            ScanView::Lung => {
                let ext = extract_lung_with(&trimmed, &prep.lung);
                if let Some(bb) = ext.bbox {
                    flags = flags[bb.min[0]..=bb.max[0]].to_vec();
                }
                ext.scan
            }
        };
        let stack = canonicalize_2d(&scan)?;
        let pooled = crate::dataset::pool_slices(stack.volume(), encoder.grid);
        for (k, (i0, i1, t)) in linear_taps(flags.len(), pooled.slices()).into_iter().enumerate() {
            let nearest = if t < 0.5 { i0 } else { i1 };
            let tokens = patch_tokens(pooled.slice(k), encoder.grid, encoder.patch)?;
            out.push((tokens, usize::from(flags[nearest])));
        }
    }
    Ok(out)
}

/// Supervised per-slice warm-up standing in for encoder pretraining. The
/// head is reset to zeros afterwards.
pub fn warmup_encoder(model: &mut SliceModel, corpus: &[(Tensor, usize)], cfg: &TrainConfig, seed: u64) -> Result<TrainingLog> {
    let m = model.clone();
    let mut sample = |store: &ParamStore, _e: usize, i: usize, grads: &mut Gradients| -> Result<f64> {
        let (tokens, label) = &corpus[i];
        let mut g = Graph::new(store);
        let x = g.input(tokens.clone());
        let e = m.encoder.embed(&mut g, x);
        let z = m.head.forward(&mut g, e);
        let l = g.cross_entropy(z, *label);
        g.backward_into(l, grads);
        Ok(g.scalar(l))
    };
    let log = fit(
        &mut model.store,
        cfg,
        corpus.len(),
        &mut substream(seed, &["warmup", "order"]),
        &mut sample,
        &mut |_| Ok(None),
    )?;
    for id in model.head.params() {
        model.store.value_mut(id).scale_assign(0.0);
    }
    Ok(log)
}

/// Pooled slice stacks for the scans, tokenized.
fn tokenized(
    model: &SliceModel,
    views: &dyn ViewStore,
    scans: &[LabeledScan],
    cfg: &Stage2aConfig,
) -> Result<Vec<Vec<Tensor>>> {
    scans
        .iter()
        .map(|s| model.tokens(&views.stem2d(&s.scan_id, cfg.view, cfg.resolution, cfg.encoder.grid)?))
        .collect()
}

pub fn predict_stage2a_scan(
    model: &SliceModel,
    cfg: &Stage2aConfig,
    views: &dyn ViewStore,
    scan_id: &str,
    variant: &str,
) -> Result<ExpertPrediction> {
    let pooled = views.stem2d(scan_id, cfg.view, cfg.resolution, cfg.encoder.grid)?;
    let probs = model.scan_probability(&model.tokens(&pooled)?)?;
    ExpertPrediction::new(scan_id, probs, Stage::Slice, variant)
}

/// Warm-up, then slice-mean training with per-epoch resampled subsets.
pub fn train_stage2a(
    views: &dyn ViewStore,
    train: &[LabeledScan],
    val: &[LabeledScan],
    cfg: &Stage2aConfig,
    synth: &SynthConfig,
    prep: &PrepConfig,
    seed: u64,
) -> Result<(SliceModel, TrainingLog)> {
    let mut model = SliceModel::new(&cfg.encoder, &mut substream(seed, &["stage2a", "init"]))?;
    if cfg.warmup.scans > 0 {
        let corpus = warmup_corpus(synth, prep, cfg.view, &cfg.encoder, cfg.warmup.scans, seed)?;
        warmup_encoder(&mut model, &corpus, &cfg.warmup.train, seed)?;
    }
    if !cfg.train_encoder {
        model.store.set_trainable_prefix("encoder.", false);
    }
    let train_tokens = tokenized(&model, views, train, cfg)?;
    let val_tokens = tokenized(&model, views, val, cfg)?;
    let log = fit_stage2a(&mut model, &train_tokens, train, &val_tokens, val, cfg, seed)?;
    Ok((model, log))
}

/// Training loop over pre-tokenized stacks.
pub fn fit_stage2a(
    model: &mut SliceModel,
    train_tokens: &[Vec<Tensor>],
    train: &[LabeledScan],
    val_tokens: &[Vec<Tensor>],
    val: &[LabeledScan],
    cfg: &Stage2aConfig,
    seed: u64,
) -> Result<TrainingLog> {
    let m = model.clone();
    let from = m.encoder.first_trainable_layer(&m.store);
    // frozen leading layers never change, so their outputs are computed once
    let cached: Vec<Vec<Tensor>> = train_tokens
        .iter()
        .map(|slices| slices.iter().map(|t| m.encoder.prefix(&m.store, t, from)).collect())
        .collect();
    let val_labels: Vec<usize> = val.iter().map(|s| s.label.index()).collect();
    let mut sample = |store: &ParamStore, epoch: usize, i: usize, grads: &mut Gradients| -> Result<f64> {
        let slices = &cached[i];
        let mut rng = substream(seed, &["stage2a", "sample", &epoch.to_string(), &train[i].scan_id]);
        let idx = sample_indices(slices.len(), cfg.k, cfg.sampling, &mut rng)?;
        let chosen: Vec<Tensor> = idx.iter().map(|&j| slices[j].clone()).collect();
        Ok(slice_loss_and_grad(&m, store, &chosen, from, train[i].label.index(), grads))
    };
    let mut validate = |store: &ParamStore| -> Result<Option<EvalSummary>> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut p = Vec::with_capacity(val.len());
        for slices in val_tokens {
            p.push(mean_probs(&per_slice_probs_with(&m, store, slices)?)?[1]);
        }
        EvalSummary::binary(&val_labels, &p).map(Some)
    };
    fit(
        &mut model.store,
        &cfg.train,
        train.len(),
        &mut substream(seed, &["stage2a", "order"]),
        &mut sample,
        &mut validate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slice_loss_examples() {
        assert_eq!(loss_slice([0.0, 1.0], 1).unwrap(), 0.0);
        assert!((loss_slice([0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let mean = mean_probs(&[[0.1, 0.9], [0.9, 0.1]]).unwrap();
        assert!((loss_slice(mean, 1).unwrap() - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!(loss_slice([1.0, 0.0], 1).unwrap().is_finite());
    }

    #[test]
    fn sampling_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_indices(24, 24, SamplingMode::Contiguous, &mut rng).unwrap(), (0..24).collect::<Vec<_>>());
        assert!(sample_indices(24, 25, SamplingMode::Contiguous, &mut rng).is_err());
        let d = sample_indices(24, 12, SamplingMode::DepthRandom, &mut rng).unwrap();
        assert!(d.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn layer_flags() {
        let cfg = SliceEncoderConfig {
            grid: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            ff_mult: 2,
            blocks: 3,
        };
        let mut m = SliceModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(m.encoder.num_layers(), 4);
        m.store.set_trainable_prefix("encoder.", false);
        m.encoder.set_layer_trainable(&mut m.store, 3, true).unwrap();
        assert_eq!(m.encoder.layer_trainability(&m.store), vec![false, false, false, true]);
        assert_eq!(m.encoder.first_trainable_layer(&m.store), 3);
    }
}
