//! Command implementations behind the `sourceaware` binary.
//!
//! Output layout under `paths.output_root`:
//!
//! ```text
//! resolved_config.toml  ledger.sha256
//! prep/            prep_config.json, stems/<scan>/<view>_<kind>.ctv
//! checkpoints/     stage1.ckpt, stage2a.ckpt, stage2b_<variant>.ckpt, stage3.ckpt
//! predictions/     <stage>_<variant>.csv, source.csv, predicted_test_distribution.json
//! metrics/         train_<stage>.json, evaluation.json
//! final_predictions.csv
//! report.md
//! ```
//!
//! Every directory written by a command receives its own copy of the
//! resolved config and ledger hash.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{self, config_hash, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{DiskViewStore, LabeledScan, SliceResolution, StemKind};
use crate::ensemble::{fuse, read_final_predictions, write_final_predictions, FinalPrediction, Route};
use crate::error::{Error, Result};
use crate::expert3d::{predict_stage1, train_stage1, Backbone3DConfig, Stage1Config, Volume3DModel};
use crate::expert_ctx::{build_stage2b, predict_stage2b_scan, train_stage2b, ContextModel, ContextVariant, Stage2bConfig};
use crate::expert_slice::{predict_stage2a_scan, train_stage2a, SliceEncoderConfig, SliceModel, Stage2aConfig};
use crate::ledger::{predicted_test_distribution, source_prediction_corrections, Split, SplitLedger};
use crate::manifest::{file_sha256, read_truth, Manifest, MANIFEST_FILE, TEST_TRUTH_FILE};
use crate::metrics::MetricsReport;
use crate::predictions::{
    read_expert_predictions, read_source_predictions, write_expert_predictions, write_source_predictions, ExpertPrediction,
    SourcePrediction, Stage,
};
use crate::prep::ScanView;
use crate::source::{build_source_clf, evaluate_sources, predict_source_scan, train_source_clf, SourceModel, Stage3Config};
use crate::synth::generate_dataset;
use crate::train::TrainingLog;
use crate::volume::{Label, SourceId};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const LEDGER_HASH_FILE: &str = "ledger.sha256";
pub const FINAL_PREDICTIONS_FILE: &str = "final_predictions.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_FILE: &str = "report.md";
const PREP_CONFIG_FILE: &str = "prep_config.json";

/// Trainable model of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrainStage {
    Volume3D,
    Slice,
    Context,
    Source,
}

impl TrainStage {
    pub const ALL: [TrainStage; 4] = [TrainStage::Volume3D, TrainStage::Slice, TrainStage::Context, TrainStage::Source];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainStage::Volume3D => "1",
            TrainStage::Slice => "2a",
            TrainStage::Context => "2b",
            TrainStage::Source => "3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage '{s}' (expected 1, 2a, 2b or 3)")))
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.as_str())
    }
}

/// Paths of a run's outputs.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.paths.output_root.clone(),
        }
    }

    pub fn prep_dir(&self) -> PathBuf {
        self.root.join("prep")
    }

    pub fn stem_dir(&self) -> PathBuf {
        self.prep_dir().join("stems")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn prediction_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn stage1_ckpt(&self) -> PathBuf {
        self.checkpoint_dir().join("stage1.ckpt")
    }

    pub fn stage2a_ckpt(&self) -> PathBuf {
        self.checkpoint_dir().join("stage2a.ckpt")
    }

    pub fn stage2b_ckpt(&self, v: ContextVariant) -> PathBuf {
        self.checkpoint_dir().join(format!("stage2b_{}.ckpt", v.as_str()))
    }

    pub fn stage3_ckpt(&self) -> PathBuf {
        self.checkpoint_dir().join("stage3.ckpt")
    }

    pub fn expert_predictions(&self, stage: Stage, variant: &str) -> PathBuf {
        self.prediction_dir().join(format!("{}_{variant}.csv", stage.as_str()))
    }

    pub fn source_predictions(&self) -> PathBuf {
        self.prediction_dir().join("source.csv")
    }

    pub fn final_predictions(&self) -> PathBuf {
        self.root.join(FINAL_PREDICTIONS_FILE)
    }

    pub fn evaluation(&self) -> PathBuf {
        self.metrics_dir().join(EVALUATION_FILE)
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// The ledger a run is generated from: corrected counts scaled to
/// `synth.percent`.
pub fn run_ledger(cfg: &RunConfig) -> Result<SplitLedger> {
    Ok(cfg.resolved_ledger()?.scaled_percent(cfg.synth.percent))
}

/// Writes the resolved config and ledger hash into `dir`.
pub fn stamp(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    let mut text = format!("ledger {}\n", run_ledger(cfg)?.fingerprint());
    let manifest = cfg.paths.data_root.join(MANIFEST_FILE);
    if manifest.exists() {
        text.push_str(&format!("manifest {}\n", file_sha256(&manifest)?));
    }
    let p = dir.join(LEDGER_HASH_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn load_manifest(cfg: &RunConfig) -> Result<(PathBuf, Manifest)> {
    let path = cfg.paths.data_root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "dataset: no manifest at {}; run `synth` first",
            path.display()
        )));
    }
    let m = Manifest::read(&path)?;
    Ok((path, m))
}

/// Labeled, non-excluded scans of a split, in manifest order.
pub fn labeled_scans(manifest: &Manifest, split: Split) -> Result<Vec<LabeledScan>> {
    manifest
        .active(split)
        .map(|r| {
            let label = r
                .label
                .ok_or_else(|| Error::InvalidArgument(format!("{} scan {} has no label", split, r.scan_id)))?;
            Ok(LabeledScan {
                scan_id: r.scan_id.clone(),
                label,
                source: r.source,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synth / prep

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub scans: usize,
    pub excluded: usize,
    pub ledger_fingerprint: String,
    pub manifest_sha256: String,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let ledger = run_ledger(cfg)?;
    let root = &cfg.paths.data_root;
    let out = generate_dataset(&ledger, &cfg.synth.to_synth_config(), cfg.seed, root)?;
    ledger.write_csv(&root.join("ledger.csv"))?;
    stamp(cfg, root)?;
    Ok(SynthSummary {
        scans: out.manifest.rows.len(),
        excluded: out.manifest.excluded_ids().len(),
        ledger_fingerprint: ledger.fingerprint(),
        manifest_sha256: file_sha256(&root.join(MANIFEST_FILE))?,
    })
}

fn stem_kinds(cfg: &RunConfig) -> Vec<(ScanView, StemKind)> {
    let dims = cfg.stage1.backbone.input_dims;
    let mut kinds: Vec<(ScanView, StemKind)> = cfg.stage1.setting.views().iter().map(|&v| (v, StemKind::Volume(dims))).collect();
    kinds.push((cfg.stage3.view, StemKind::Volume(dims)));
    kinds.push((cfg.stage2a.view, StemKind::Slices(cfg.stage2a.resolution, cfg.stage2a.encoder.grid)));
    kinds.push((cfg.stage2b.view, StemKind::Slices(SliceResolution::Res24x448, cfg.stage2a.encoder.grid)));
    let mut out = Vec::new();
    for k in kinds {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepSummary {
    pub scans: usize,
    pub stems: usize,
}

/// Computes and stores every pooled input the configured stages read.
pub fn cmd_prep(cfg: &RunConfig) -> Result<PrepSummary> {
    let (mpath, manifest) = load_manifest(cfg)?;
    let layout = Layout::new(cfg);
    let store = DiskViewStore::new(&mpath, &manifest, cfg.prep, &layout.stem_dir());
    let kinds = stem_kinds(cfg);
    let mut scans = 0;
    for split in Split::ALL {
        for row in manifest.active(split) {
            for &(view, kind) in &kinds {
                store.materialize(&row.scan_id, view, kind)?;
            }
            scans += 1;
        }
    }
    write_json(
        &layout.prep_dir().join(PREP_CONFIG_FILE),
        &json!({ "prep": cfg.prep, "hash": config_hash(&cfg.prep)? }),
    )?;
    stamp(cfg, &layout.prep_dir())?;
    stamp(cfg, &layout.root)?;
    Ok(PrepSummary {
        scans,
        stems: scans * kinds.len(),
    })
}

fn open_views(cfg: &RunConfig) -> Result<(Manifest, DiskViewStore)> {
    let (mpath, manifest) = load_manifest(cfg)?;
    let layout = Layout::new(cfg);
    let marker = layout.prep_dir().join(PREP_CONFIG_FILE);
    if !marker.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "prep: no preprocessing outputs under {}; run `prep` first",
            layout.prep_dir().display()
        )));
    }
    let stored = read_json(&marker)?;
    if stored["hash"] != json!(config_hash(&cfg.prep)?) {
        return Err(Error::InvalidArgument(
            "prep outputs were made with different preprocessing settings; rerun `prep`".into(),
        ));
    }
    let store = DiskViewStore::new(&mpath, &manifest, cfg.prep, &layout.stem_dir());
    Ok((manifest, store))
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stage2bCheckpointConfig {
    encoder: SliceEncoderConfig,
    stage2b: Stage2bConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stage3CheckpointConfig {
    backbone: Backbone3DConfig,
    stage3: Stage3Config,
}

fn require(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "{what} checkpoint not found at {}; run `train --stage {}` first",
            path.display(),
            what.trim_start_matches("stage ")
        )));
    }
    checkpoint::load(path)
}

fn structure_rng() -> ChaCha8Rng {
    // only shapes matter; values come from the checkpoint
    ChaCha8Rng::seed_from_u64(0)
}

pub fn load_stage1(path: &Path) -> Result<(Volume3DModel, Stage1Config, Checkpoint)> {
    let ck = require(path, "stage 1")?;
    ck.expect_kind("stage1")?;
    let cfg: Stage1Config = ck.config()?;
    let mut model = Volume3DModel::new(&cfg.backbone, &mut structure_rng())?;
    ck.restore_into(&mut model.store)?;
    Ok((model, cfg, ck))
}

pub fn load_stage2a(path: &Path) -> Result<(SliceModel, Stage2aConfig, Checkpoint)> {
    let ck = require(path, "stage 2a")?;
    ck.expect_kind("stage2a")?;
    let cfg: Stage2aConfig = ck.config()?;
    let mut model = SliceModel::new(&cfg.encoder, &mut structure_rng())?;
    ck.restore_into(&mut model.store)?;
    Ok((model, cfg, ck))
}

pub fn load_stage2b(path: &Path) -> Result<(ContextModel, Stage2bConfig, Checkpoint)> {
    let ck = require(path, "stage 2b")?;
    ck.expect_kind("stage2b")?;
    let cfg: Stage2bCheckpointConfig = ck.config()?;
    let variant = ContextVariant::parse(&ck.header.variant)?;
    let skeleton = SliceModel::new(&cfg.encoder, &mut structure_rng())?;
    let mut model = build_stage2b(&skeleton, variant, &cfg.stage2b.context, &mut structure_rng())?;
    ck.restore_into(&mut model.store)?;
    Ok((model, cfg.stage2b, ck))
}

pub fn load_stage3(path: &Path) -> Result<(SourceModel, Stage3Config, Checkpoint)> {
    let ck = require(path, "stage 3")?;
    ck.expect_kind("stage3")?;
    let cfg: Stage3CheckpointConfig = ck.config()?;
    let skeleton = Volume3DModel::new(&cfg.backbone, &mut structure_rng())?;
    let mut model = build_source_clf(&skeleton)?;
    ck.restore_into(&mut model.store)?;
    Ok((model, cfg.stage3, ck))
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub stage: String,
    /// One entry per trained model: validation ACC, Macro-F1, AUC.
    pub models: BTreeMap<String, Value>,
}

fn log_metrics(log: &TrainingLog) -> Value {
    let best = log.best();
    json!({
        "ACC": best.and_then(|r| r.val).map(|v| v.acc),
        "Macro-F1": best.and_then(|r| r.val).map(|v| v.macro_f1),
        "AUC": best.and_then(|r| r.val).and_then(|v| v.auc),
        "best_epoch": log.best_epoch,
        "steps": log.steps,
        "checksum": format!("{:016x}", log.checksum),
        "epochs": log.epochs,
    })
}

pub fn cmd_train(cfg: &RunConfig, stage: TrainStage) -> Result<TrainSummary> {
    let layout = Layout::new(cfg);
    // dependency checks come before any data access
    let stage1_dep = match stage {
        TrainStage::Source => Some(load_stage1(&layout.stage1_ckpt())?),
        _ => None,
    };
    let stage2a_dep = match stage {
        TrainStage::Context => Some(load_stage2a(&layout.stage2a_ckpt())?),
        _ => None,
    };
    let (manifest, views) = open_views(cfg)?;
    let train = labeled_scans(&manifest, Split::Train)?;
    let val = labeled_scans(&manifest, Split::Val)?;
    let mut models = BTreeMap::new();
    match stage {
        TrainStage::Volume3D => {
            let (model, log) = train_stage1(&views, &train, &val, &cfg.stage1, cfg.seed)?;
            let m = log_metrics(&log);
            checkpoint::save(&layout.stage1_ckpt(), "stage1", cfg.stage1.setting.as_str(), &cfg.stage1, m.clone(), &model.store)?;
            models.insert(format!("stage1_{}", cfg.stage1.setting.as_str()), m);
        }
        TrainStage::Slice => {
            let synth = cfg.synth.to_synth_config();
            let (model, log) = train_stage2a(&views, &train, &val, &cfg.stage2a, &synth, &cfg.prep, cfg.seed)?;
            let m = log_metrics(&log);
            let variant = cfg.stage2a.sampling.as_str();
            checkpoint::save(&layout.stage2a_ckpt(), "stage2a", variant, &cfg.stage2a, m.clone(), &model.store)?;
            models.insert(format!("stage2a_{variant}"), m);
        }
        TrainStage::Context => {
            let (s2a, _, _) = stage2a_dep.expect("loaded above");
            let ck_cfg = Stage2bCheckpointConfig {
                encoder: s2a.encoder.config.clone(),
                stage2b: cfg.stage2b.clone(),
            };
            for &variant in &cfg.stage2b.variants {
                let (model, log) = train_stage2b(&views, &train, &val, &s2a, variant, &cfg.stage2b, cfg.seed)?;
                let m = log_metrics(&log);
                checkpoint::save(&layout.stage2b_ckpt(variant), "stage2b", variant.as_str(), &ck_cfg, m.clone(), &model.store)?;
                models.insert(format!("stage2b_{}", variant.as_str()), m);
            }
        }
        TrainStage::Source => {
            let (s1, _, _) = stage1_dep.expect("loaded above");
            let (model, log, metrics) = train_source_clf(&s1, &views, &train, &val, &cfg.stage3, cfg.seed)?;
            let mut m = log_metrics(&log);
            m["source_validation"] = json!(metrics);
            let ck_cfg = Stage3CheckpointConfig {
                backbone: s1.backbone.config.clone(),
                stage3: cfg.stage3.clone(),
            };
            checkpoint::save(&layout.stage3_ckpt(), "stage3", "source", &ck_cfg, m.clone(), &model.store)?;
            models.insert("stage3_source".into(), m);
        }
    }
    let summary = TrainSummary {
        stage: stage.as_str().into(),
        models,
    };
    write_json(&layout.metrics_dir().join(format!("train_stage{}.json", stage.as_str())), &summary)?;
    stamp(cfg, &layout.checkpoint_dir())?;
    stamp(cfg, &layout.metrics_dir())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// predict / fuse

#[derive(Clone, Debug, Serialize)]
pub struct PredictSummary {
    pub scans: usize,
    pub files: Vec<String>,
    pub predicted_test_sources: [u64; 4],
    pub warnings: Vec<String>,
}

fn hash_warning(ck: &Checkpoint, current: &impl Serialize, what: &str, warnings: &mut Vec<String>) -> Result<()> {
    if ck.header.config_hash != config_hash(current)? {
        warnings.push(format!("{what} checkpoint was trained with a different config than the current one"));
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<PredictSummary> {
    let layout = Layout::new(cfg);
    let (s1, s1_cfg, ck1) = load_stage1(&layout.stage1_ckpt())?;
    let (s2a, s2a_cfg, ck2a) = load_stage2a(&layout.stage2a_ckpt())?;
    let mut s2b = Vec::new();
    for &v in &cfg.stage2b.variants {
        s2b.push(load_stage2b(&layout.stage2b_ckpt(v))?);
    }
    let (s3, s3_cfg, ck3) = load_stage3(&layout.stage3_ckpt())?;
    let mut warnings = Vec::new();
    hash_warning(&ck1, &cfg.stage1, "stage 1", &mut warnings)?;
    hash_warning(&ck2a, &cfg.stage2a, "stage 2a", &mut warnings)?;
    for (m, _, ck) in &s2b {
        let current = Stage2bCheckpointConfig {
            encoder: cfg.stage2a.encoder.clone(),
            stage2b: cfg.stage2b.clone(),
        };
        hash_warning(ck, &current, &format!("stage 2b {}", m.variant.as_str()), &mut warnings)?;
    }
    let current3 = Stage3CheckpointConfig {
        backbone: cfg.stage1.backbone.clone(),
        stage3: cfg.stage3.clone(),
    };
    hash_warning(&ck3, &current3, "stage 3", &mut warnings)?;

    let (manifest, views) = open_views(cfg)?;
    let mut ids: Vec<(String, Split)> = Split::ALL
        .iter()
        .flat_map(|&s| manifest.active(s).map(move |r| (r.scan_id.clone(), s)))
        .collect();
    ids.sort();

    let s1_variant = s1_cfg.setting.as_str();
    let s2a_variant = s2a_cfg.sampling.as_str();
    let mut p1 = Vec::with_capacity(ids.len());
    let mut p2a = Vec::with_capacity(ids.len());
    let mut p2b: Vec<Vec<ExpertPrediction>> = vec![Vec::with_capacity(ids.len()); s2b.len()];
    let mut src = Vec::with_capacity(ids.len());
    for (id, _) in &ids {
        p1.push(predict_stage1(&s1, s1_cfg.setting, &views, id, s1_variant)?);
        p2a.push(predict_stage2a_scan(&s2a, &s2a_cfg, &views, id, s2a_variant)?);
        for (k, (m, c, _)) in s2b.iter().enumerate() {
            p2b[k].push(predict_stage2b_scan(m, c.view, &views, id)?);
        }
        src.push(predict_source_scan(&s3, s3_cfg.view, &views, id)?);
    }
    let mut files = Vec::new();
    let mut write = |stage: Stage, variant: &str, preds: &[ExpertPrediction]| -> Result<()> {
        let path = layout.expert_predictions(stage, variant);
        write_expert_predictions(&path, preds)?;
        files.push(path.file_name().unwrap().to_string_lossy().into_owned());
        Ok(())
    };
    write(Stage::Volume3D, s1_variant, &p1)?;
    write(Stage::Slice, s2a_variant, &p2a)?;
    for ((m, _, _), preds) in s2b.iter().zip(&p2b) {
        write(Stage::Context, m.variant.as_str(), preds)?;
    }
    write_source_predictions(&layout.source_predictions(), &src)?;
    files.push("source.csv".into());

    let test_preds: Vec<SourcePrediction> = src
        .iter()
        .zip(&ids)
        .filter(|(_, (_, s))| *s == Split::Test)
        .map(|(p, _)| p.clone())
        .collect();
    let excluded = manifest.excluded_ids();
    let counts = predicted_test_distribution(&test_preds, &excluded)?;
    write_json(
        &layout.prediction_dir().join("predicted_test_distribution.json"),
        &json!({
            "counts": counts,
            "total": counts.iter().sum::<u64>(),
            "excluded": excluded,
            "corrections": source_prediction_corrections(counts)
                .iter()
                .map(|c| json!({"cell": c.cell.to_string(), "delta": c.delta, "note": c.note}))
                .collect::<Vec<_>>(),
        }),
    )?;
    stamp(cfg, &layout.prediction_dir())?;
    Ok(PredictSummary {
        scans: ids.len(),
        files,
        predicted_test_sources: counts,
        warnings,
    })
}

pub fn cmd_fuse(cfg: &RunConfig) -> Result<Vec<FinalPrediction>> {
    let layout = Layout::new(cfg);
    let mut variant_preds = Vec::new();
    for stage in [Stage::Volume3D, Stage::Slice, Stage::Context] {
        for v in cfg.vote.variants_for(stage) {
            let path = layout.expert_predictions(stage, v);
            if !path.exists() {
                return Err(Error::MissingPrerequisite(format!(
                    "predict: no {} predictions for variant '{v}' at {}; run `predict` first",
                    stage.as_str(),
                    path.display()
                )));
            }
            variant_preds.push(read_expert_predictions(&path)?);
        }
    }
    let spath = layout.source_predictions();
    if !spath.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "predict: no source predictions at {}; run `predict` first",
            spath.display()
        )));
    }
    let sources = read_source_predictions(&spath)?;
    let fused = fuse(&variant_preds, &sources, &cfg.vote)?;
    write_final_predictions(&layout.final_predictions(), &fused)?;
    stamp(cfg, &layout.root)?;
    Ok(fused)
}

// ---------------------------------------------------------------------------
// evaluate / report

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    /// Fused predictions per split (`val`, `test`).
    pub final_metrics: BTreeMap<String, MetricsReport>,
    /// Each expert variant file on the test split.
    pub experts: BTreeMap<String, MetricsReport>,
    /// Source classifier accuracy and macro-F1 per split.
    pub source: BTreeMap<String, Value>,
    /// Stage 1 accuracy on test scans whose true source is 0.
    pub stage1_source0_accuracy: Option<f64>,
    pub routes: BTreeMap<String, usize>,
    pub tie_flags: usize,
}

struct Truth {
    label: Label,
    source: SourceId,
    split: Split,
}

fn truth_table(cfg: &RunConfig, manifest: &Manifest) -> Result<BTreeMap<String, Truth>> {
    let mut out = BTreeMap::new();
    for split in [Split::Train, Split::Val] {
        for r in manifest.active(split) {
            if let (Some(label), Some(source)) = (r.label, r.source) {
                out.insert(r.scan_id.clone(), Truth { label, source, split });
            }
        }
    }
    let tpath = cfg.paths.data_root.join(TEST_TRUTH_FILE);
    if tpath.exists() {
        let excluded = manifest.excluded_ids();
        for t in read_truth(&tpath)? {
            if !excluded.contains(&t.scan_id.as_str()) {
                out.insert(
                    t.scan_id,
                    Truth {
                        label: t.label,
                        source: t.source,
                        split: Split::Test,
                    },
                );
            }
        }
    }
    Ok(out)
}

fn report_for<'a>(
    rows: impl Iterator<Item = (&'a Truth, usize, f64)>,
    mode: crate::metrics::PerSourceMode,
) -> Result<Option<MetricsReport>> {
    let (mut labels, mut preds, mut scores, mut sources) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (t, p, s) in rows {
        labels.push(t.label.index());
        preds.push(p);
        scores.push(s);
        sources.push(t.source);
    }
    if labels.is_empty() {
        return Ok(None);
    }
    MetricsReport::compute(&labels, &preds, &scores, &sources, mode).map(Some)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    let layout = Layout::new(cfg);
    let fpath = layout.final_predictions();
    if !fpath.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "fuse: no final predictions at {}; run `fuse` first",
            fpath.display()
        )));
    }
    let (_, manifest) = load_manifest(cfg)?;
    let truth = truth_table(cfg, &manifest)?;
    let finals = read_final_predictions(&fpath)?;
    let mode = cfg.evaluate.per_source;

    let mut final_metrics = BTreeMap::new();
    for split in [Split::Val, Split::Test] {
        let rows = finals.iter().filter_map(|f| {
            truth
                .get(&f.scan_id)
                .filter(|t| t.split == split)
                .map(|t| (t, f.label.index(), f.p_covid))
        });
        if let Some(r) = report_for(rows, mode)? {
            final_metrics.insert(split.as_str().to_string(), r);
        }
    }

    let mut experts = BTreeMap::new();
    let mut stage1_source0_accuracy = None;
    for stage in [Stage::Volume3D, Stage::Slice, Stage::Context] {
        for v in cfg.vote.variants_for(stage) {
            let path = layout.expert_predictions(stage, v);
            if !path.exists() {
                continue;
            }
            let preds = read_expert_predictions(&path)?;
            let test_rows = || {
                preds.iter().filter_map(|p| {
                    truth
                        .get(&p.scan_id)
                        .filter(|t| t.split == Split::Test)
                        .map(|t| (t, p.label().index(), p.p_covid()))
                })
            };
            if let Some(r) = report_for(test_rows(), mode)? {
                experts.insert(format!("{}_{v}", stage.as_str()), r);
            }
            if stage == Stage::Volume3D && stage1_source0_accuracy.is_none() {
                let s0: Vec<(usize, usize)> = test_rows()
                    .filter(|(t, _, _)| t.source.index() == 0)
                    .map(|(t, p, _)| (t.label.index(), p))
                    .collect();
                if !s0.is_empty() {
                    let correct = s0.iter().filter(|(l, p)| l == p).count();
                    stage1_source0_accuracy = Some(correct as f64 / s0.len() as f64);
                }
            }
        }
    }

    let mut source = BTreeMap::new();
    let spath = layout.source_predictions();
    if spath.exists() {
        let sp = read_source_predictions(&spath)?;
        for split in [Split::Val, Split::Test] {
            let (labels, preds): (Vec<usize>, Vec<usize>) = sp
                .iter()
                .filter_map(|p| {
                    truth
                        .get(&p.scan_id)
                        .filter(|t| t.split == split)
                        .map(|t| (t.source.index(), p.predicted_source.index()))
                })
                .unzip();
            if !labels.is_empty() {
                let m = evaluate_sources(&labels, &preds)?;
                source.insert(split.as_str().to_string(), json!({"ACC": m.acc, "Macro-F1": m.macro_f1, "n": m.n}));
            }
        }
    }

    let mut routes = BTreeMap::new();
    for r in [Route::Stage1Only, Route::ThreeExpertVote] {
        routes.insert(r.as_str().to_string(), finals.iter().filter(|f| f.route == r).count());
    }
    let eval = Evaluation {
        final_metrics,
        experts,
        source,
        stage1_source0_accuracy,
        routes,
        tie_flags: finals.iter().filter(|f| f.tie_flag).count(),
    };
    write_json(&layout.evaluation(), &eval)?;
    stamp(cfg, &layout.metrics_dir())?;
    Ok(eval)
}

fn fmt_metric(v: &Value) -> String {
    v.as_f64().map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Markdown summary of the evaluation and training logs.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let epath = layout.evaluation();
    if !epath.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "evaluate: no evaluation at {}; run `evaluate` first",
            epath.display()
        )));
    }
    let eval = read_json(&epath)?;
    let cols = ["ACC", "Macro-F1", "AUC", "S0", "S1", "S2", "S3"];
    let mut out = String::from("# Run report\n\n");
    let mut table = |title: &str, rows: &serde_json::Map<String, Value>| {
        out.push_str(&format!("## {title}\n\n| model | {} |\n|---|{}\n", cols.join(" | "), "---|".repeat(cols.len())));
        for (name, r) in rows {
            let cells: Vec<String> = cols.iter().map(|c| fmt_metric(&r[*c])).collect();
            out.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
        }
        out.push('\n');
    };
    if let Some(m) = eval["final_metrics"].as_object() {
        table("Fused predictions", m);
    }
    if let Some(m) = eval["experts"].as_object() {
        table("Experts on test", m);
    }
    out.push_str("## Source classifier\n\n");
    if let Some(m) = eval["source"].as_object() {
        for (split, r) in m {
            out.push_str(&format!(
                "- {split}: ACC {} Macro-F1 {} (n={})\n",
                fmt_metric(&r["ACC"]),
                fmt_metric(&r["Macro-F1"]),
                r["n"]
            ));
        }
    }
    out.push_str(&format!(
        "\nStage 1 accuracy on source 0 test scans: {}\n\nRoutes: {}\n",
        fmt_metric(&eval["stage1_source0_accuracy"]),
        eval["routes"]
    ));
    let mut warnings = Vec::new();
    for section in ["final_metrics", "experts"] {
        if let Some(m) = eval[section].as_object() {
            for (name, r) in m {
                for w in r["warnings"].as_array().into_iter().flatten() {
                    warnings.push(format!("{name}: {}", w.as_str().unwrap_or_default()));
                }
            }
        }
    }
    if !warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    out.push_str("\n## Training\n\n");
    for stage in TrainStage::ALL {
        let p = layout.metrics_dir().join(format!("train_stage{}.json", stage.as_str()));
        if !p.exists() {
            continue;
        }
        let t = read_json(&p)?;
        for (name, m) in t["models"].as_object().into_iter().flatten() {
            out.push_str(&format!(
                "- {name}: best epoch {} val ACC {} Macro-F1 {} AUC {}\n",
                m["best_epoch"],
                fmt_metric(&m["ACC"]),
                fmt_metric(&m["Macro-F1"]),
                fmt_metric(&m["AUC"])
            ));
        }
    }
    let path = layout.root.join(REPORT_FILE);
    fs::write(&path, &out).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

/// Every command in order: synth, prep, train 1/2a/2b/3, predict, fuse,
/// evaluate, report.
pub fn run_all(cfg: &RunConfig) -> Result<Evaluation> {
    stamp(cfg, &cfg.paths.output_root)?;
    cmd_synth(cfg)?;
    cmd_prep(cfg)?;
    for stage in TrainStage::ALL {
        cmd_train(cfg, stage)?;
    }
    cmd_predict(cfg)?;
    cmd_fuse(cfg)?;
    let eval = cmd_evaluate(cfg)?;
    cmd_report(cfg)?;
    Ok(eval)
}
