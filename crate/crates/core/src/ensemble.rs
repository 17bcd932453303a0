//! Within-stage voting, source routing and cross-expert majority.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictions::{csv_err, csv_reader, csv_writer, fmt_prob, parse_f64, ExpertPrediction, SourcePrediction, Stage};
use crate::volume::{Label, SourceId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinStageRule {
    /// Hard-label majority; ties go to the mean probability.
    MajorityThenMeanProb,
    /// Threshold on the mean probability.
    MeanProb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossExpertRule {
    Majority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    pub within_stage_rule: WithinStageRule,
    pub cross_expert_rule: CrossExpertRule,
    /// Scans predicted as source 0 take the Stage 1 label.
    pub source0_route: bool,
    /// Variant ids voted within each stage, keyed by stage name.
    pub variants: BTreeMap<String, Vec<String>>,
}

impl Default for VoteConfig {
    fn default() -> Self {
        let mut variants = BTreeMap::new();
        variants.insert("stage1".into(), vec!["orig_lung".into()]);
        variants.insert("stage2a".into(), vec!["crs".into()]);
        variants.insert("stage2b".into(), vec!["trans_last2".into(), "flat_cls".into()]);
        Self {
            within_stage_rule: WithinStageRule::MajorityThenMeanProb,
            cross_expert_rule: CrossExpertRule::Majority,
            source0_route: true,
            variants,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<()> {
        for stage in [Stage::Volume3D, Stage::Slice, Stage::Context] {
            match self.variants.get(stage.as_str()) {
                Some(v) if !v.is_empty() => {}
                _ => return Err(Error::InvalidArgument(format!("no variants registered for {}", stage.as_str()))),
            }
        }
        if let Some(k) = self.variants.keys().find(|k| Stage::parse(k).is_err()) {
            return Err(Error::InvalidArgument(format!("unknown stage '{k}' in variant registry")));
        }
        Ok(())
    }

    pub fn variants_for(&self, stage: Stage) -> &[String] {
        self.variants.get(stage.as_str()).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// One stage's aggregated decision for a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct StageVote {
    pub scan_id: String,
    pub stage: Stage,
    pub label: Label,
    pub mean_p_covid: f64,
    /// Set when the decision came from a mean probability of exactly 0.5.
    pub tie_flag: bool,
}

fn mean_label(mean: f64) -> (Label, bool) {
    let label = if mean >= 0.5 { Label::Covid } else { Label::NonCovid };
    (label, mean == 0.5)
}

pub fn within_stage_vote(preds: &[ExpertPrediction], rule: WithinStageRule) -> Result<StageVote> {
    let first = preds.first().ok_or_else(|| Error::InvalidArgument("no predictions to vote".into()))?;
    if let Some(p) = preds.iter().find(|p| p.stage != first.stage || p.scan_id != first.scan_id) {
        return Err(Error::InvalidArgument(format!(
            "within-stage vote mixes {}/{} with {}/{}",
            first.scan_id,
            first.stage.as_str(),
            p.scan_id,
            p.stage.as_str()
        )));
    }
    let mean = preds.iter().map(|p| p.p_covid()).sum::<f64>() / preds.len() as f64;
    let (label, tie_flag) = match rule {
        WithinStageRule::MeanProb => mean_label(mean),
        WithinStageRule::MajorityThenMeanProb => {
            let ones = preds.iter().filter(|p| p.label() == Label::Covid).count();
            let zeros = preds.len() - ones;
            match ones.cmp(&zeros) {
                std::cmp::Ordering::Greater => (Label::Covid, false),
                std::cmp::Ordering::Less => (Label::NonCovid, false),
                std::cmp::Ordering::Equal => mean_label(mean),
            }
        }
    };
    Ok(StageVote {
        scan_id: first.scan_id.clone(),
        stage: first.stage,
        label,
        mean_p_covid: mean,
        tie_flag,
    })
}

/// Majority of three hard labels.
pub fn cross_expert_vote(s1: Label, s2a: Label, s2b: Label) -> Label {
    let ones = [s1, s2a, s2b].iter().filter(|&&l| l == Label::Covid).count();
    if ones >= 2 {
        Label::Covid
    } else {
        Label::NonCovid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Stage1Only,
    ThreeExpertVote,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Stage1Only => "stage1_only",
            Route::ThreeExpertVote => "three_expert_vote",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1_only" => Ok(Route::Stage1Only),
            "three_expert_vote" => Ok(Route::ThreeExpertVote),
            _ => Err(Error::InvalidArgument(format!("unknown route '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalPrediction {
    pub scan_id: String,
    pub label: Label,
    /// Score for ranking metrics: the Stage 1 mean on the Stage 1 route,
    /// else the mean of the three stage means.
    pub p_covid: f64,
    pub route: Route,
    pub predicted_source: SourceId,
    /// Stage-level labels in the order stage 1, 2a, 2b.
    pub stage_labels: [Label; 3],
    pub tie_flag: bool,
}

/// Applies the routing rule to one scan's stage votes.
pub fn route_and_predict(source: &SourcePrediction, votes: &[StageVote], cfg: &VoteConfig) -> Result<FinalPrediction> {
    let get = |stage: Stage| {
        votes
            .iter()
            .find(|v| v.stage == stage && v.scan_id == source.scan_id)
            .ok_or_else(|| Error::MissingPrerequisite(format!("{} prediction for scan {}", stage.as_str(), source.scan_id)))
    };
    let s1 = get(Stage::Volume3D)?;
    let s2a = get(Stage::Slice)?;
    let s2b = get(Stage::Context)?;
    let stage_labels = [s1.label, s2a.label, s2b.label];
    let (label, p_covid, route, tie_flag) = if cfg.source0_route && source.predicted_source.index() == 0 {
        (s1.label, s1.mean_p_covid, Route::Stage1Only, s1.tie_flag)
    } else {
        let CrossExpertRule::Majority = cfg.cross_expert_rule;
        let flag = s1.tie_flag || s2a.tie_flag || s2b.tie_flag;
        let p = (s1.mean_p_covid + s2a.mean_p_covid + s2b.mean_p_covid) / 3.0;
        (cross_expert_vote(s1.label, s2a.label, s2b.label), p, Route::ThreeExpertVote, flag)
    };
    Ok(FinalPrediction {
        scan_id: source.scan_id.clone(),
        label,
        p_covid,
        route,
        predicted_source: source.predicted_source,
        stage_labels,
        tie_flag,
    })
}

/// Fuses every scan. `variant_preds` holds one list per variant file; all
/// lists and the source predictions must cover the same scan ids.
pub fn fuse(variant_preds: &[Vec<ExpertPrediction>], sources: &[SourcePrediction], cfg: &VoteConfig) -> Result<Vec<FinalPrediction>> {
    cfg.validate()?;
    let ids: BTreeSet<&str> = sources.iter().map(|s| s.scan_id.as_str()).collect();
    if ids.len() != sources.len() {
        return Err(Error::InvalidArgument("duplicate scan ids in source predictions".into()));
    }
    let mut grouped: BTreeMap<(&str, Stage), Vec<ExpertPrediction>> = BTreeMap::new();
    for file in variant_preds {
        let file_ids: BTreeSet<&str> = file.iter().map(|p| p.scan_id.as_str()).collect();
        if file_ids != ids {
            let missing = ids.symmetric_difference(&file_ids).next().copied().unwrap_or("?");
            return Err(Error::InvalidArgument(format!("scan id mismatch across prediction files at {missing}")));
        }
        for p in file {
            if !cfg.variants_for(p.stage).contains(&p.variant_id) {
                continue;
            }
            grouped.entry((p.scan_id.as_str(), p.stage)).or_default().push(p.clone());
        }
    }
    let mut out = Vec::with_capacity(sources.len());
    let mut ordered: Vec<&SourcePrediction> = sources.iter().collect();
    ordered.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    for src in ordered {
        let mut votes = Vec::with_capacity(3);
        for stage in [Stage::Volume3D, Stage::Slice, Stage::Context] {
            let mut preds = grouped.remove(&(src.scan_id.as_str(), stage)).unwrap_or_default();
            if preds.is_empty() {
                return Err(Error::MissingPrerequisite(format!(
                    "no registered {} variant predicted scan {}",
                    stage.as_str(),
                    src.scan_id
                )));
            }
            preds.sort_by(|a, b| a.variant_id.cmp(&b.variant_id));
            votes.push(within_stage_vote(&preds, cfg.within_stage_rule)?);
        }
        out.push(route_and_predict(src, &votes, cfg)?);
    }
    Ok(out)
}

pub const FINAL_HEADER: [&str; 9] = [
    "scan_id",
    "label",
    "p_covid",
    "route",
    "predicted_source",
    "stage1",
    "stage2a",
    "stage2b",
    "tie_flag",
];

/// Writes the final prediction file sorted by scan id.
pub fn write_final_predictions(path: &Path, preds: &[FinalPrediction]) -> Result<()> {
    let mut rows: Vec<&FinalPrediction> = preds.iter().collect();
    rows.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    let mut w = csv_writer(path)?;
    w.write_record(FINAL_HEADER).map_err(|e| csv_err(path, e))?;
    for p in rows {
        w.write_record([
            p.scan_id.clone(),
            p.label.to_string(),
            fmt_prob(p.p_covid),
            p.route.as_str().to_string(),
            p.predicted_source.to_string(),
            p.stage_labels[0].to_string(),
            p.stage_labels[1].to_string(),
            p.stage_labels[2].to_string(),
            u8::from(p.tie_flag).to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_final_predictions(path: &Path) -> Result<Vec<FinalPrediction>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(FINAL_HEADER) {
        return Err(Error::format(path, "unexpected final prediction header"));
    }
    let label = |s: &str| -> Result<Label> {
        let i: usize = s.parse().map_err(|_| Error::format(path, format!("bad label '{s}'")))?;
        Label::from_index(i)
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != FINAL_HEADER.len() {
            return Err(Error::format(path, format!("expected {} columns, found {}", FINAL_HEADER.len(), rec.len())));
        }
        let src: u8 = rec[4].parse().map_err(|_| Error::format(path, format!("bad source '{}'", &rec[4])))?;
        out.push(FinalPrediction {
            scan_id: rec[0].to_string(),
            label: label(&rec[1])?,
            p_covid: parse_f64(path, &rec[2])?,
            route: Route::parse(&rec[3])?,
            predicted_source: SourceId::new(src)?,
            stage_labels: [label(&rec[5])?, label(&rec[6])?, label(&rec[7])?],
            tie_flag: &rec[8] == "1",
        });
    }
    Ok(out)
}
