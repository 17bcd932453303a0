//! Dataset manifest: one CSV row per scan.
//!
//! ```text
//! scan_id,split,source,label,path,excluded
//! ct_scan_00000,train,0,1,volumes/ct_scan_00000.ctv,false
//! ct_scan_00310,test,unknown,unknown,volumes/ct_scan_00310.ctv,false
//! ```
//!
//! `path` is relative to the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ledger::{fmt_opt, parse_label, parse_source, Cell, Split, SplitLedger};
use crate::predictions::{csv_err, csv_reader, csv_writer};
use crate::rng::sha256_hex;
use crate::volume::{Label, SourceId};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TEST_TRUTH_FILE: &str = "test_truth.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub scan_id: String,
    pub split: Split,
    pub source: Option<SourceId>,
    pub label: Option<Label>,
    pub path: String,
    pub excluded: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["scan_id", "split", "source", "label", "path", "excluded"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.scan_id.as_str(),
                r.split.as_str(),
                &fmt_opt(r.source),
                &fmt_opt(r.label),
                &r.path,
                if r.excluded { "true" } else { "false" },
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv_reader(path)?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["scan_id", "split", "source", "label", "path", "excluded"] {
            return Err(Error::format(path, "manifest header must be scan_id,split,source,label,path,excluded"));
        }
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let wrap = |e: Error| Error::format(path, e.to_string());
            let excluded = match rec[5].trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(Error::format(path, format!("bad excluded flag '{other}'"))),
            };
            let row = ManifestRow {
                scan_id: rec[0].to_string(),
                split: Split::parse(&rec[1]).map_err(wrap)?,
                source: parse_source(&rec[2]).map_err(wrap)?,
                label: parse_label(&rec[3]).map_err(wrap)?,
                path: rec[4].to_string(),
                excluded,
            };
            if !seen.insert(row.scan_id.clone()) {
                return Err(Error::format(path, format!("duplicate scan id {}", row.scan_id)));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Non-excluded rows of a split.
    pub fn active(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows_in(split).filter(|r| !r.excluded)
    }

    /// Ledger recounted from non-excluded rows.
    pub fn recount(&self) -> SplitLedger {
        let mut counts = std::collections::BTreeMap::<Cell, u64>::new();
        for r in self.rows.iter().filter(|r| !r.excluded) {
            *counts.entry(Cell::new(r.split, r.source, r.label)).or_default() += 1;
        }
        let mut l = SplitLedger::new();
        for (c, n) in counts {
            l.set(c, n).expect("manifest cells are valid");
        }
        l
    }

    pub fn excluded_ids(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| r.excluded).map(|r| r.scan_id.as_str()).collect()
    }
}

/// Resolves a row's volume path against the manifest location.
pub fn volume_path(manifest_path: &Path, row: &ManifestRow) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(&row.path)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Held-out ground truth for unlabeled rows: `scan_id,source,label`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruthRow {
    pub scan_id: String,
    pub source: SourceId,
    pub label: Label,
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scan_id", "source", "label"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([r.scan_id.as_str(), &r.source.to_string(), &r.label.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let wrap = |e: Error| Error::format(path, e.to_string());
        let source = parse_source(&rec[1])
            .map_err(wrap)?
            .ok_or_else(|| Error::format(path, "truth rows need a source"))?;
        let label = parse_label(&rec[2])
            .map_err(wrap)?
            .ok_or_else(|| Error::format(path, "truth rows need a label"))?;
        out.push(TruthRow {
            scan_id: rec[0].to_string(),
            source,
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_recount() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let m = Manifest {
            rows: vec![
                ManifestRow {
                    scan_id: "a".into(),
                    split: Split::Train,
                    source: Some(SourceId::new(1).unwrap()),
                    label: Some(Label::Covid),
                    path: "volumes/a.ctv".into(),
                    excluded: false,
                },
                ManifestRow {
                    scan_id: "b".into(),
                    split: Split::Test,
                    source: None,
                    label: None,
                    path: "volumes/b.ctv".into(),
                    excluded: true,
                },
            ],
        };
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back, m);
        let l = back.recount();
        assert_eq!(l.get(Split::Train, Some(SourceId::new(1).unwrap()), Some(Label::Covid)), 1);
        assert_eq!(l.split_total(Split::Test), 0);
        assert_eq!(back.excluded_ids(), vec!["b"]);
        assert_eq!(volume_path(&p, &m.rows[0]), dir.path().join("volumes/a.ctv"));
    }
}
