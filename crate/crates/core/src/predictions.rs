//! Per-scan prediction records and their CSV files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Label, SourceId};

/// Decimal places used for probabilities in every prediction file.
pub const PROB_DECIMALS: usize = 9;

/// Stage that produced a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Volume3D,
    Slice,
    Context,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Volume3D => "stage1",
            Stage::Slice => "stage2a",
            Stage::Context => "stage2b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Volume3D),
            "stage2a" => Ok(Stage::Slice),
            "stage2b" => Ok(Stage::Context),
            other => Err(Error::InvalidArgument(format!("unknown stage '{other}'"))),
        }
    }
}

/// Binary class probabilities for one scan from one expert variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPrediction {
    pub scan_id: String,
    pub probs: [f64; 2],
    pub stage: Stage,
    pub variant_id: String,
}

impl ExpertPrediction {
    pub fn new(scan_id: impl Into<String>, probs: [f64; 2], stage: Stage, variant_id: impl Into<String>) -> Result<Self> {
        let p = Self {
            scan_id: scan_id.into(),
            probs,
            stage,
            variant_id: variant_id.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite(format!("invalid probabilities {:?} for {}", self.probs, self.scan_id)));
        }
        if (self.probs[0] + self.probs[1] - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "probabilities {:?} for {} do not sum to 1",
                self.probs, self.scan_id
            )));
        }
        Ok(())
    }

    /// Hard label; `p_covid == 0.5` resolves to 1.
    pub fn label(&self) -> Label {
        if self.probs[1] >= 0.5 {
            Label::Covid
        } else {
            Label::NonCovid
        }
    }

    pub fn p_covid(&self) -> f64 {
        self.probs[1]
    }
}

/// Four-way source posterior for one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePrediction {
    pub scan_id: String,
    pub source_probs: [f64; 4],
    pub predicted_source: SourceId,
}

impl SourcePrediction {
    /// Builds a prediction with argmax ties resolved to the lowest index.
    pub fn from_probs(scan_id: impl Into<String>, source_probs: [f64; 4]) -> Result<Self> {
        let scan_id = scan_id.into();
        if source_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite(format!("invalid source probabilities for {scan_id}")));
        }
        if (source_probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("source probabilities for {scan_id} do not sum to 1")));
        }
        let mut best = 0;
        for (i, &p) in source_probs.iter().enumerate().skip(1) {
            if p > source_probs[best] {
                best = i;
            }
        }
        Ok(Self {
            scan_id,
            source_probs,
            predicted_source: SourceId::new(best as u8)?,
        })
    }
}

pub(crate) fn fmt_prob(p: f64) -> String {
    format!("{p:.prec$}", prec = PROB_DECIMALS)
}

pub(crate) fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("not a number: '{s}'")))
}

fn check_unique<'a>(path: &Path, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::format(path, format!("duplicate scan id {id}")));
        }
    }
    Ok(())
}

/// Writes `scan_id,stage,variant,p_noncovid,p_covid,label`, sorted by scan id.
pub fn write_expert_predictions(path: &Path, preds: &[ExpertPrediction]) -> Result<()> {
    let mut rows: Vec<&ExpertPrediction> = preds.iter().collect();
    rows.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    let mut w = csv_writer(path)?;
    w.write_record(["scan_id", "stage", "variant", "p_noncovid", "p_covid", "label"])
        .map_err(|e| csv_err(path, e))?;
    for p in rows {
        w.write_record([
            p.scan_id.as_str(),
            p.stage.as_str(),
            p.variant_id.as_str(),
            &fmt_prob(p.probs[0]),
            &fmt_prob(p.probs[1]),
            &p.label().to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_expert_predictions(path: &Path) -> Result<Vec<ExpertPrediction>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 6 {
            return Err(Error::format(path, format!("expected 6 columns, found {}", rec.len())));
        }
        let probs = [parse_f64(path, &rec[3])?, parse_f64(path, &rec[4])?];
        let p = ExpertPrediction {
            scan_id: rec[0].to_string(),
            probs,
            stage: Stage::parse(&rec[1])?,
            variant_id: rec[2].to_string(),
        };
        p.validate().map_err(|e| Error::format(path, e.to_string()))?;
        out.push(p);
    }
    check_unique(path, out.iter().map(|p| p.scan_id.as_str()))?;
    Ok(out)
}

/// Writes `scan_id,p_s0..p_s3,predicted_source`, sorted by scan id.
pub fn write_source_predictions(path: &Path, preds: &[SourcePrediction]) -> Result<()> {
    let mut rows: Vec<&SourcePrediction> = preds.iter().collect();
    rows.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    let mut w = csv_writer(path)?;
    w.write_record(["scan_id", "p_s0", "p_s1", "p_s2", "p_s3", "predicted_source"])
        .map_err(|e| csv_err(path, e))?;
    for p in rows {
        let mut rec = vec![p.scan_id.clone()];
        rec.extend(p.source_probs.iter().map(|&q| fmt_prob(q)));
        rec.push(p.predicted_source.to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_source_predictions(path: &Path) -> Result<Vec<SourcePrediction>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 6 {
            return Err(Error::format(path, format!("expected 6 columns, found {}", rec.len())));
        }
        let mut probs = [0.0; 4];
        for (k, p) in probs.iter_mut().enumerate() {
            *p = parse_f64(path, &rec[1 + k])?;
        }
        let stored: u8 = rec[5]
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("bad source '{}'", &rec[5])))?;
        let source_id = SourceId::new(stored).map_err(|e| Error::format(path, e.to_string()))?;
        let p = SourcePrediction {
            scan_id: rec[0].to_string(),
            source_probs: probs,
            predicted_source: source_id,
        };
        out.push(p);
    }
    check_unique(path, out.iter().map(|p| p.scan_id.as_str()))?;
    Ok(out)
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_argmax_ties_go_low() {
        let p = SourcePrediction::from_probs("a", [0.25; 4]).unwrap();
        assert_eq!(p.predicted_source.index(), 0);
        let p = SourcePrediction::from_probs("a", [0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_eq!(p.predicted_source.index(), 1);
    }

    #[test]
    fn expert_round_trip_and_sorting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let preds = vec![
            ExpertPrediction::new("b", [0.25, 0.75], Stage::Slice, "crs").unwrap(),
            ExpertPrediction::new("a", [0.5, 0.5], Stage::Slice, "crs").unwrap(),
        ];
        write_expert_predictions(&path, &preds).unwrap();
        let back = read_expert_predictions(&path).unwrap();
        assert_eq!(back[0].scan_id, "a");
        assert_eq!(back[0].label(), Label::Covid);
        assert_eq!(back[1].probs, [0.25, 0.75]);
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(ExpertPrediction::new("a", [0.2, 0.2], Stage::Volume3D, "x").is_err());
        assert!(ExpertPrediction::new("a", [f64::NAN, 1.0], Stage::Volume3D, "x").is_err());
    }
}
