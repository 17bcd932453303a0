//! Stage 2b: Transformer context over the slice embeddings of a scan.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sourceaware_nn::{softmax, BlockTrace, Gradients, Graph, Linear, ParamId, ParamStore, Tensor, TransformerBlock, Var};

use crate::dataset::{patch_tokens, pool_slices, LabeledScan, SliceResolution, ViewStore};
use crate::error::{Error, Result};
use crate::expert_slice::{SliceEncoder, SliceModel};
use crate::predictions::{ExpertPrediction, Stage};
use crate::prep::{ScanView, SliceStack2D};
use crate::rng::substream;
use crate::volume::Volume;
use crate::train::{fit, EvalSummary, TrainConfig, TrainingLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextVariant {
    /// Frozen encoder; context blocks and head train.
    TransOnly,
    /// As `TransOnly` plus the last two encoder layers.
    TransLast2,
    /// Frozen encoder; concatenated slice embeddings feed the head.
    FlatCls,
}

impl ContextVariant {
    pub const ALL: [ContextVariant; 3] = [
        ContextVariant::TransOnly,
        ContextVariant::TransLast2,
        ContextVariant::FlatCls,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextVariant::TransOnly => "trans_only",
            ContextVariant::TransLast2 => "trans_last2",
            ContextVariant::FlatCls => "flat_cls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage 2b variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub blocks: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Learned per-slice position embedding.
    pub positional: bool,
    pub slices: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 4,
            ff_mult: 4,
            positional: true,
            slices: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ContextModel {
    pub store: ParamStore,
    pub encoder: SliceEncoder,
    pub variant: ContextVariant,
    pub config: ContextConfig,
    pos: Option<ParamId>,
    blocks: Vec<TransformerBlock>,
    pub head: Linear,
    /// Test hook: attention replaced by the identity map.
    pub identity_attention: bool,
}

/// New context model whose encoder is copied from Stage 2a; the Stage 2a
/// head is dropped.
pub fn build_stage2b<R: Rng + ?Sized>(
    stage2a: &SliceModel,
    variant: ContextVariant,
    config: &ContextConfig,
    rng: &mut R,
) -> Result<ContextModel> {
    let mut store = ParamStore::new();
    let encoder = SliceEncoder::new(&mut store, &stage2a.encoder.config, rng)?;
    let copied = store.load_matching(&stage2a.store)?;
    if copied != store.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} encoder parameters", store.len()),
            got: format!("{copied} matched in the stage 2a model"),
        });
    }
    store.set_trainable_prefix("encoder.", false);
    if variant == ContextVariant::TransLast2 {
        let n = encoder.num_layers();
        for layer in n.saturating_sub(2)..n {
            encoder.set_layer_trainable(&mut store, layer, true)?;
        }
    }
    let e = encoder.config.dim;
    let (pos, blocks, head) = match variant {
        ContextVariant::FlatCls => (None, Vec::new(), Linear::zeros(&mut store, "ctx.head", "head", config.slices * e, 2)),
        _ => {
            if e % config.heads != 0 || config.blocks == 0 {
                return Err(Error::InvalidArgument("context blocks need dim divisible by heads".into()));
            }
            let pos = if config.positional {
                let init: Vec<f64> = (0..config.slices * e).map(|_| rng.random_range(-0.02..0.02)).collect();
                Some(store.add("ctx.pos", "context", Tensor::from_vec(&[config.slices, e], init)?))
            } else {
                None
            };
            let blocks = (0..config.blocks)
                .map(|i| TransformerBlock::new(&mut store, &format!("ctx.block{i}"), "context", e, config.heads, config.ff_mult * e, rng))
                .collect();
            (pos, blocks, Linear::zeros(&mut store, "ctx.head", "head", e, 2))
        }
    };
    Ok(ContextModel {
        store,
        encoder,
        variant,
        config: config.clone(),
        pos,
        blocks,
        head,
        identity_attention: false,
    })
}

impl ContextModel {
    /// Parameters that the optimizer may update.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.store.trainable_names()
    }

    pub fn has_attention(&self) -> bool {
        self.store.iter().any(|(_, p)| p.name.contains(".query.") && p.name.starts_with("ctx."))
    }

    /// Logits from per-slice hidden states taken after `from` encoder layers.
    fn logits(&self, g: &mut Graph<'_>, hidden: &[Tensor], from: usize, mut traces: Option<&mut Vec<BlockTrace>>) -> Var {
        let rows: Vec<Var> = hidden
            .iter()
            .map(|h| {
                let x = g.input(h.clone());
                let h = self.encoder.forward_range(g, x, from, self.encoder.num_layers());
                g.mean_rows(h)
            })
            .collect();
        let seq = g.concat_rows(&rows);
        if self.variant == ContextVariant::FlatCls {
            let flat = g.reshape(seq, &[1, self.config.slices * self.encoder.config.dim]);
            return self.head.forward(g, flat);
        }
        let mut h = match self.pos {
            Some(p) => {
                let p = g.param(p);
                g.add(seq, p)
            }
            None => seq,
        };
        for b in &self.blocks {
            let mut t = BlockTrace::default();
            h = b.forward_traced(g, h, Some(&mut t), self.identity_attention);
            if let Some(ts) = traces.as_deref_mut() {
                ts.push(t);
            }
        }
        let pooled = g.mean_rows(h);
        self.head.forward(g, pooled)
    }

    fn check_slices(&self, n: usize) -> Result<()> {
        if n != self.config.slices {
            return Err(Error::ShapeMismatch {
                expected: format!("{} slices", self.config.slices),
                got: format!("{n} slices"),
            });
        }
        Ok(())
    }

    /// Probabilities from tokenized slices.
    pub fn probs_from_tokens(&self, tokens: &[Tensor]) -> Result<[f64; 2]> {
        self.probs_with(&self.store, tokens, 0)
    }

    fn probs_with(&self, store: &ParamStore, hidden: &[Tensor], from: usize) -> Result<[f64; 2]> {
        self.check_slices(hidden.len())?;
        let mut g = Graph::new(store);
        let z = self.logits(&mut g, hidden, from, None);
        let p = softmax(g.value(z).data());
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stage 2b probabilities".into()));
        }
        Ok([p[0], p[1]])
    }

    /// Probabilities plus per-block attention matrices.
    pub fn traced(&self, tokens: &[Tensor]) -> Result<([f64; 2], Vec<BlockTrace>)> {
        self.check_slices(tokens.len())?;
        let mut g = Graph::new(&self.store);
        let mut traces = Vec::new();
        let z = self.logits(&mut g, tokens, 0, Some(&mut traces));
        let p = softmax(g.value(z).data());
        Ok(([p[0], p[1]], traces))
    }

    /// Cross-entropy on scan logits, gradients accumulated into `grads`.
    pub fn loss_and_grad(&self, store: &ParamStore, hidden: &[Tensor], from: usize, label: usize, grads: &mut Gradients) -> f64 {
        let mut g = Graph::new(store);
        let z = self.logits(&mut g, hidden, from, None);
        let l = g.cross_entropy(z, label);
        g.backward_into(l, grads);
        g.scalar(l)
    }

    pub fn tokens(&self, pooled: &Volume) -> Result<Vec<Tensor>> {
        let cfg = &self.encoder.config;
        if pooled.dims()[1..] != [cfg.grid, cfg.grid] {
            return Err(Error::ShapeMismatch {
                expected: format!("slices of {0}x{0}", cfg.grid),
                got: format!("{:?}", pooled.dims()),
            });
        }
        (0..pooled.slices())
            .map(|z| patch_tokens(pooled.slice(z), cfg.grid, cfg.patch))
            .collect()
    }
}

/// Scan probabilities for a canonical 24-slice stack.
pub fn forward_ctx(model: &ContextModel, stack: &SliceStack2D) -> Result<[f64; 2]> {
    let pooled = pool_slices(stack.volume(), model.encoder.config.grid);
    model.probs_from_tokens(&model.tokens(&pooled)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2bConfig {
    /// Variants trained and registered for voting.
    pub variants: Vec<ContextVariant>,
    pub context: ContextConfig,
    pub train: TrainConfig,
    pub view: ScanView,
}

impl Default for Stage2bConfig {
    fn default() -> Self {
        Self {
            variants: vec![ContextVariant::TransLast2, ContextVariant::FlatCls],
            context: ContextConfig::default(),
            train: TrainConfig {
                epochs: 8,
                batch_size: 8,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            view: ScanView::Lung,
        }
    }
}

fn load_tokens(model: &ContextModel, views: &dyn ViewStore, scans: &[LabeledScan], view: ScanView) -> Result<Vec<Vec<Tensor>>> {
    scans
        .iter()
        .map(|s| {
            let pooled = views.stem2d(&s.scan_id, view, SliceResolution::Res24x448, model.encoder.config.grid)?;
            model.tokens(&pooled)
        })
        .collect()
}

pub fn predict_stage2b_scan(model: &ContextModel, view: ScanView, views: &dyn ViewStore, scan_id: &str) -> Result<ExpertPrediction> {
    let pooled = views.stem2d(scan_id, view, SliceResolution::Res24x448, model.encoder.config.grid)?;
    let probs = model.probs_from_tokens(&model.tokens(&pooled)?)?;
    ExpertPrediction::new(scan_id, probs, Stage::Context, model.variant.as_str())
}

/// Trains a context model built from `stage2a`.
pub fn train_stage2b(
    views: &dyn ViewStore,
    train: &[LabeledScan],
    val: &[LabeledScan],
    stage2a: &SliceModel,
    variant: ContextVariant,
    cfg: &Stage2bConfig,
    seed: u64,
) -> Result<(ContextModel, TrainingLog)> {
    let mut model = build_stage2b(stage2a, variant, &cfg.context, &mut substream(seed, &["stage2b", variant.as_str(), "init"]))?;
    let train_tokens = load_tokens(&model, views, train, cfg.view)?;
    let val_tokens = load_tokens(&model, views, val, cfg.view)?;
    let log = fit_stage2b(&mut model, &train_tokens, train, &val_tokens, val, &cfg.train, seed)?;
    Ok((model, log))
}

/// Training loop over pre-tokenized stacks; frozen encoder prefixes are
/// evaluated once.
pub fn fit_stage2b(
    model: &mut ContextModel,
    train_tokens: &[Vec<Tensor>],
    train: &[LabeledScan],
    val_tokens: &[Vec<Tensor>],
    val: &[LabeledScan],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingLog> {
    for t in train_tokens.iter().chain(val_tokens) {
        model.check_slices(t.len())?;
    }
    let m = model.clone();
    let from = m.encoder.first_trainable_layer(&m.store);
    let prefix = |slices: &Vec<Tensor>| -> Vec<Tensor> { slices.iter().map(|t| m.encoder.prefix(&m.store, t, from)).collect() };
    let train_hidden: Vec<Vec<Tensor>> = train_tokens.iter().map(prefix).collect();
    let val_hidden: Vec<Vec<Tensor>> = val_tokens.iter().map(prefix).collect();
    let val_labels: Vec<usize> = val.iter().map(|s| s.label.index()).collect();
    let mut sample = |store: &ParamStore, _e: usize, i: usize, grads: &mut Gradients| -> Result<f64> {
        Ok(m.loss_and_grad(store, &train_hidden[i], from, train[i].label.index(), grads))
    };
    let mut validate = |store: &ParamStore| -> Result<Option<EvalSummary>> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut p = Vec::with_capacity(val.len());
        for h in &val_hidden {
            p.push(m.probs_with(store, h, from)?[1]);
        }
        EvalSummary::binary(&val_labels, &p).map(Some)
    };
    fit(
        &mut model.store,
        cfg,
        train.len(),
        &mut substream(seed, &["stage2b", model.variant.as_str(), "order"]),
        &mut sample,
        &mut validate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert_slice::SliceEncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SliceModel {
        let cfg = SliceEncoderConfig {
            grid: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            ff_mult: 2,
            blocks: 3,
        };
        SliceModel::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn variant_parameter_sets() {
        let s2a = tiny();
        let ctx = ContextConfig {
            heads: 2,
            ff_mult: 2,
            slices: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let only = build_stage2b(&s2a, ContextVariant::TransOnly, &ctx, &mut rng).unwrap();
        assert!(only.trainable_names().iter().all(|n| n.starts_with("ctx.")));
        let last2 = build_stage2b(&s2a, ContextVariant::TransLast2, &ctx, &mut rng).unwrap();
        assert_eq!(last2.encoder.layer_trainability(&last2.store), vec![false, false, true, true]);
        let flat = build_stage2b(&s2a, ContextVariant::FlatCls, &ctx, &mut rng).unwrap();
        assert!(!flat.has_attention());
        assert!(only.has_attention());
        assert!(ContextVariant::parse("trans_all").is_err());
    }

    #[test]
    fn encoder_copied_from_stage2a() {
        let s2a = tiny();
        let m = build_stage2b(&s2a, ContextVariant::TransOnly, &ContextConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (_, p) in m.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")) {
            let src = s2a.store.find(&p.name).unwrap();
            assert_eq!(s2a.store.value(src), &p.value);
        }
    }
}
