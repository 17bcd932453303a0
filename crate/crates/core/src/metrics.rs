//! Accuracy, macro-F1, rank AUC and per-source F1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::SourceId;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a} entries"),
            got: format!("{b} entries"),
        });
    }
    if a == 0 {
        return Err(Error::Degenerate("no samples".into()));
    }
    Ok(())
}

/// Binary confusion counts with class 1 as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl Confusion {
    pub fn from_labels(labels: &[usize], preds: &[usize]) -> Result<Self> {
        check_lengths(labels.len(), preds.len())?;
        let mut c = Confusion::default();
        for (&y, &p) in labels.iter().zip(preds) {
            match (y, p) {
                (0, 0) => c.tn += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                (1, 1) => c.tp += 1,
                _ => return Err(Error::InvalidArgument(format!("non-binary pair ({y}, {p})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// F1 of `class`, or `None` when the class is neither present nor predicted.
    pub fn class_f1(&self, class: usize) -> Option<f64> {
        let (tp, fp, fn_) = if class == 1 {
            (self.tp, self.fp, self.fn_)
        } else {
            (self.tn, self.fn_, self.fp)
        };
        if tp + fp + fn_ == 0 {
            None
        } else {
            Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        }
    }

    /// `[[tn, fp], [fn, tp]]`, rows are true labels.
    pub fn matrix(&self) -> [[u64; 2]; 2] {
        [[self.tn, self.fp], [self.fn_, self.tp]]
    }
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> Result<f64> {
    check_lengths(labels.len(), preds.len())?;
    Ok(labels.iter().zip(preds).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over `0..n_classes`.
///
/// A class with no true and no predicted members scores 0 and adds a
/// warning.
pub fn macro_f1_multiclass(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<(f64, Vec<String>)> {
    check_lengths(labels.len(), preds.len())?;
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= n_classes || p >= n_classes {
            return Err(Error::InvalidArgument(format!("class index outside 0..{n_classes}: ({y}, {p})")));
        }
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let mut warnings = Vec::new();
    let mut sum = 0.0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            warnings.push(format!("class {c} has no true or predicted samples; F1 counted as 0"));
        } else {
            sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok((sum / n_classes as f64, warnings))
}

pub fn macro_f1(labels: &[usize], preds: &[usize]) -> Result<f64> {
    macro_f1_multiclass(labels, preds, 2).map(|(v, _)| v)
}

/// Mann-Whitney AUC with midranks, so tied scores earn half credit.
pub fn auc(labels: &[usize], scores: &[f64]) -> Result<f64> {
    check_lengths(labels.len(), scores.len())?;
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::InvalidArgument("AUC labels must be binary".into()));
    }
    if n_pos == 0 {
        return Err(Error::Degenerate("AUC undefined: no samples of class 1".into()));
    }
    if n_neg == 0 {
        return Err(Error::Degenerate("AUC undefined: no samples of class 0".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their average
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerSourceMode {
    /// F1 of class 1 inside each source subset.
    #[default]
    PositiveClass,
    /// Macro-F1 inside each source subset.
    Macro,
}

/// F1 per source. Empty or degenerate subsets are skipped with a warning.
pub fn per_source_f1(
    labels: &[usize],
    preds: &[usize],
    sources: &[SourceId],
    mode: PerSourceMode,
) -> Result<(BTreeMap<SourceId, f64>, Vec<String>)> {
    check_lengths(labels.len(), preds.len())?;
    check_lengths(labels.len(), sources.len())?;
    let mut out = BTreeMap::new();
    let mut warnings = Vec::new();
    for s in SourceId::ALL {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| sources[i] == s).collect();
        if idx.is_empty() {
            warnings.push(format!("source {s}: no samples, skipped"));
            continue;
        }
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        match mode {
            PerSourceMode::PositiveClass => match Confusion::from_labels(&y, &p)?.class_f1(1) {
                Some(f) => {
                    out.insert(s, f);
                }
                None => warnings.push(format!("source {s}: no true or predicted positives, skipped")),
            },
            PerSourceMode::Macro => {
                let (f, w) = macro_f1_multiclass(&y, &p, 2)?;
                warnings.extend(w.into_iter().map(|m| format!("source {s}: {m}")));
                out.insert(s, f);
            }
        }
    }
    Ok((out, warnings))
}

/// One evaluation run. Serializes with the column names used in reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub macro_f1: f64,
    pub auc: f64,
    pub per_source_f1: BTreeMap<SourceId, f64>,
    pub confusion: Confusion,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// `sources` may be empty when per-source scores are not wanted.
    pub fn compute(
        labels: &[usize],
        preds: &[usize],
        scores: &[f64],
        sources: &[SourceId],
        mode: PerSourceMode,
    ) -> Result<Self> {
        let confusion = Confusion::from_labels(labels, preds)?;
        let (macro_f1, mut warnings) = macro_f1_multiclass(labels, preds, 2)?;
        let auc = auc(labels, scores)?;
        let per_source_f1 = if sources.is_empty() {
            BTreeMap::new()
        } else {
            let (m, w) = per_source_f1(labels, preds, sources, mode)?;
            warnings.extend(w);
            m
        };
        Ok(Self {
            acc: confusion.accuracy(),
            macro_f1,
            auc,
            per_source_f1,
            confusion,
            warnings,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = serializer.serialize_map(None)?;
        m.serialize_entry("ACC", &self.acc)?;
        m.serialize_entry("Macro-F1", &self.macro_f1)?;
        m.serialize_entry("AUC", &self.auc)?;
        for s in SourceId::ALL {
            m.serialize_entry(&format!("S{s}"), &self.per_source_f1.get(&s))?;
        }
        m.serialize_entry("confusion", &self.confusion.matrix())?;
        m.serialize_entry("n", &self.confusion.total())?;
        m.serialize_entry("warnings", &self.warnings)?;
        m.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_macro_f1() {
        let f = macro_f1(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert!((f - 11.0 / 15.0).abs() < 1e-12);
        let f = macro_f1(&[1, 1, 0, 0], &[1, 1, 1, 1]).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_warns() {
        let (f, w) = macro_f1_multiclass(&[1, 1], &[1, 1], 2).unwrap();
        assert_eq!(f, 0.5);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn auc_ties_and_degenerate() {
        assert_eq!(auc(&[1, 0], &[0.3, 0.3]).unwrap(), 0.5);
        assert_eq!(auc(&[1, 0, 1, 0], &[0.9, 0.1, 0.8, 0.2]).unwrap(), 1.0);
        let e = auc(&[1, 1], &[0.1, 0.2]).unwrap_err();
        assert!(e.to_string().contains("class 0"));
    }

    #[test]
    fn length_mismatch() {
        assert!(macro_f1(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn report_keys() {
        let r = MetricsReport::compute(
            &[1, 0],
            &[1, 0],
            &[0.9, 0.1],
            &[SourceId::new(0).unwrap(), SourceId::new(0).unwrap()],
            PerSourceMode::PositiveClass,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["ACC", "Macro-F1", "AUC", "S0", "S1", "S2", "S3"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["S0"], 1.0);
        assert!(v["S1"].is_null());
    }
}
