//! Per-split, per-source, per-class scan counts and replayable corrections.
//!
//! Corrections are plain data. The built-in set lives in
//! `data/builtin_corrections.csv` and uses the same format as user files:
//!
//! ```text
//! kind,target,split,source,class,delta,note
//! exclusion,ct_scan_0,train,0,0,-1,listed scan confirmed absent
//! ```
//!
//! `source` and `class` accept `unknown`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::predictions::{csv_err, csv_reader, csv_writer, SourcePrediction};
use crate::rng::sha256_hex;
use crate::volume::{Label, SourceId};

const BUILTIN_CORRECTIONS: &str = include_str!("../data/builtin_corrections.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "unknown".to_string(), |x| x.to_string())
}

pub(crate) fn parse_source(s: &str) -> Result<Option<SourceId>> {
    match s.trim() {
        "unknown" | "" => Ok(None),
        t => {
            let n: u8 = t
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad source '{t}'")))?;
            SourceId::new(n).map(Some)
        }
    }
}

pub(crate) fn parse_label(s: &str) -> Result<Option<Label>> {
    match s.trim() {
        "unknown" | "" => Ok(None),
        t => {
            let n: usize = t
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad class '{t}'")))?;
            Label::from_index(n).map(Some)
        }
    }
}

/// One ledger cell key; `None` means unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub split: Split,
    pub source: Option<SourceId>,
    pub class: Option<Label>,
}

impl Cell {
    pub fn new(split: Split, source: Option<SourceId>, class: Option<Label>) -> Self {
        Self { split, source, class }
    }

    fn validate(&self) -> Result<()> {
        if self.split == Split::Test && self.class.is_some() {
            return Err(Error::Ledger(format!("test cell {self} must have unknown class")));
        }
        Ok(())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.split, fmt_opt(self.source), fmt_opt(self.class))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorrectionKind {
    MultiSampleExpansion,
    Exclusion,
    ValAugmentation,
    SourcePrediction,
}

impl CorrectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionKind::MultiSampleExpansion => "multi_sample_expansion",
            CorrectionKind::Exclusion => "exclusion",
            CorrectionKind::ValAugmentation => "val_augmentation",
            CorrectionKind::SourcePrediction => "source_prediction",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "multi_sample_expansion" => Ok(CorrectionKind::MultiSampleExpansion),
            "exclusion" => Ok(CorrectionKind::Exclusion),
            "val_augmentation" => Ok(CorrectionKind::ValAugmentation),
            "source_prediction" => Ok(CorrectionKind::SourcePrediction),
            other => Err(Error::Ledger(format!("unknown correction kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectionRecord {
    pub kind: CorrectionKind,
    pub target: String,
    pub cell: Cell,
    pub delta: i64,
    pub note: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitLedger {
    counts: BTreeMap<Cell, u64>,
    corrections: Vec<CorrectionRecord>,
}

impl SplitLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, cell: Cell, count: u64) -> Result<()> {
        cell.validate()?;
        if count == 0 {
            self.counts.remove(&cell);
        } else {
            self.counts.insert(cell, count);
        }
        Ok(())
    }

    pub fn get(&self, split: Split, source: Option<SourceId>, class: Option<Label>) -> u64 {
        self.counts.get(&Cell::new(split, source, class)).copied().unwrap_or(0)
    }

    /// Sum over every source (including unknown) for one split and class.
    pub fn total(&self, split: Split, class: Option<Label>) -> u64 {
        self.counts
            .iter()
            .filter(|(c, _)| c.split == split && c.class == class)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn split_total(&self, split: Split) -> u64 {
        self.counts.iter().filter(|(c, _)| c.split == split).map(|(_, n)| n).sum()
    }

    /// Nonzero cells in key order.
    pub fn cells(&self) -> impl Iterator<Item = (Cell, u64)> + '_ {
        self.counts.iter().map(|(c, n)| (*c, *n))
    }

    pub fn corrections(&self) -> &[CorrectionRecord] {
        &self.corrections
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Each cell multiplied by `percent / 100`, rounded half up.
    pub fn scaled_percent(&self, percent: u64) -> SplitLedger {
        let counts = self
            .counts
            .iter()
            .map(|(c, n)| (*c, (n * percent + 50) / 100))
            .filter(|(_, n)| *n > 0)
            .collect();
        SplitLedger {
            counts,
            corrections: Vec::new(),
        }
    }

    /// SHA-256 over the canonical CSV rendering of the counts.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_csv_string().as_bytes())
    }

    fn to_csv_string(&self) -> String {
        let mut s = String::from("split,source,class,count\n");
        for (c, n) in &self.counts {
            s.push_str(&format!("{},{},{},{}\n", c.split, fmt_opt(c.source), fmt_opt(c.class), n));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Reads `split,source,class,count` rows.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv_reader(path)?;
        let mut ledger = SplitLedger::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if rec.len() != 4 {
                return Err(Error::format(path, format!("expected 4 columns, found {}", rec.len())));
            }
            let wrap = |e: Error| Error::format(path, e.to_string());
            let cell = Cell::new(
                Split::parse(&rec[0]).map_err(wrap)?,
                parse_source(&rec[1]).map_err(wrap)?,
                parse_label(&rec[2]).map_err(wrap)?,
            );
            let n: u64 = rec[3]
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad count '{}'", &rec[3])))?;
            if ledger.counts.contains_key(&cell) {
                return Err(Error::format(path, format!("duplicate cell {cell}")));
            }
            ledger.set(cell, n).map_err(wrap)?;
        }
        Ok(ledger)
    }
}

fn set_row(ledger: &mut SplitLedger, split: Split, class: Label, counts: [u64; 4]) {
    for (s, n) in SourceId::ALL.iter().zip(counts) {
        ledger
            .set(Cell::new(split, Some(*s), Some(class)), n)
            .expect("train/val cells carry a class");
    }
}

/// The official split as distributed.
pub fn official_ledger() -> SplitLedger {
    let mut l = SplitLedger::new();
    set_row(&mut l, Split::Train, Label::Covid, [175, 175, 39, 175]);
    set_row(&mut l, Split::Train, Label::NonCovid, [165, 165, 165, 165]);
    set_row(&mut l, Split::Val, Label::Covid, [43, 43, 0, 42]);
    set_row(&mut l, Split::Val, Label::NonCovid, [45, 45, 45, 45]);
    l.set(Cell::new(Split::Test, None, None), 1488).expect("test cell");
    l
}

/// Applies corrections in order, failing if any cell would go negative.
pub fn apply_corrections(ledger: &SplitLedger, corrections: &[CorrectionRecord]) -> Result<SplitLedger> {
    let mut out = ledger.clone();
    for rec in corrections {
        rec.cell.validate()?;
        let current = out.counts.get(&rec.cell).copied().unwrap_or(0) as i64;
        let next = current + rec.delta;
        if next < 0 {
            return Err(Error::Ledger(format!(
                "{} correction on {} ({}) would make cell {} negative: {current} {:+}",
                rec.kind.as_str(),
                rec.target,
                rec.note,
                rec.cell,
                rec.delta
            )));
        }
        out.set(rec.cell, next as u64)?;
        out.corrections.push(rec.clone());
    }
    Ok(out)
}

pub fn parse_corrections(text: &str) -> Result<Vec<CorrectionRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Ledger(e.to_string()))?.clone();
    let expected = ["kind", "target", "split", "source", "class", "delta", "note"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Ledger(format!(
            "corrections header must be {}",
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ledger(format!("record {}: {e}", i + 1)))?;
        let ctx = |e: Error| Error::Ledger(format!("record {}: {e}", i + 1));
        out.push(CorrectionRecord {
            kind: CorrectionKind::parse(&rec[0]).map_err(ctx)?,
            target: rec[1].to_string(),
            cell: Cell::new(
                Split::parse(&rec[2]).map_err(ctx)?,
                parse_source(&rec[3]).map_err(ctx)?,
                parse_label(&rec[4]).map_err(ctx)?,
            ),
            delta: rec[5]
                .trim()
                .parse()
                .map_err(|_| Error::Ledger(format!("record {}: bad delta '{}'", i + 1, &rec[5])))?,
            note: rec[6].to_string(),
        });
    }
    Ok(out)
}

pub fn read_corrections(path: &Path) -> Result<Vec<CorrectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corrections(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_corrections(path: &Path, records: &[CorrectionRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["kind", "target", "split", "source", "class", "delta", "note"])
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.kind.as_str(),
            &r.target,
            r.cell.split.as_str(),
            &fmt_opt(r.cell.source),
            &fmt_opt(r.cell.class),
            &r.delta.to_string(),
            &r.note,
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The built-in correction set shipped with the crate.
pub fn builtin_corrections() -> Vec<CorrectionRecord> {
    parse_corrections(BUILTIN_CORRECTIONS).expect("embedded corrections file parses")
}

/// Official ledger with the built-in corrections applied.
pub fn revised_ledger() -> SplitLedger {
    apply_corrections(&official_ledger(), &builtin_corrections()).expect("built-in corrections apply")
}

/// A folder listed as one scan that actually holds several samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FolderManifest {
    pub folder_id: String,
    pub split: Split,
    pub source: Option<SourceId>,
    pub label: Option<Label>,
    pub subfolders: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanEntry {
    pub scan_id: String,
    pub split: Split,
    pub source: Option<SourceId>,
    pub label: Option<Label>,
}

/// One entry per subfolder, each inheriting the parent's metadata.
pub fn expand_multi_sample_folder(folder: &FolderManifest) -> Result<Vec<ScanEntry>> {
    if folder.subfolders.is_empty() {
        return Err(Error::Ledger(format!("folder {} has no subfolders", folder.folder_id)));
    }
    let mut seen = BTreeSet::new();
    folder
        .subfolders
        .iter()
        .map(|sub| {
            if !seen.insert(sub.as_str()) {
                return Err(Error::Ledger(format!("folder {} lists {sub} twice", folder.folder_id)));
            }
            Ok(ScanEntry {
                scan_id: format!("{}/{}", folder.folder_id, sub),
                split: folder.split,
                source: folder.source,
                label: folder.label,
            })
        })
        .collect()
}

/// The ledger delta implied by expanding `folder`: its single entry is
/// replaced by one entry per subfolder.
pub fn expansion_correction(folder: &FolderManifest) -> Result<CorrectionRecord> {
    let n = expand_multi_sample_folder(folder)?.len() as i64;
    Ok(CorrectionRecord {
        kind: CorrectionKind::MultiSampleExpansion,
        target: folder.folder_id.clone(),
        cell: Cell::new(folder.split, folder.source, folder.label),
        delta: n - 1,
        note: format!("{n} subfolders replace one entry"),
    })
}

/// Per-source counts of predicted test sources after removing exclusions.
pub fn predicted_test_distribution(predictions: &[SourcePrediction], exclusions: &[&str]) -> Result<[u64; 4]> {
    let excluded: BTreeSet<&str> = exclusions.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut counts = [0u64; 4];
    for p in predictions {
        if !seen.insert(p.scan_id.as_str()) {
            return Err(Error::Ledger(format!("duplicate prediction for {}", p.scan_id)));
        }
        if !excluded.contains(p.scan_id.as_str()) {
            counts[p.predicted_source.index()] += 1;
        }
    }
    Ok(counts)
}

/// Correction records moving predicted test counts from the unknown
/// source cell into per-source cells.
pub fn source_prediction_corrections(counts: [u64; 4]) -> Vec<CorrectionRecord> {
    let mut out = Vec::new();
    for (s, n) in SourceId::ALL.iter().zip(counts) {
        let note = format!("predicted source {s}");
        for (source, delta) in [(None, -(n as i64)), (Some(*s), n as i64)] {
            out.push(CorrectionRecord {
                kind: CorrectionKind::SourcePrediction,
                target: "test_source_estimate".into(),
                cell: Cell::new(Split::Test, source, None),
                delta,
                note: note.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(i: u8) -> Option<SourceId> {
        Some(SourceId::new(i).unwrap())
    }

    #[test]
    fn official_cells() {
        let l = official_ledger();
        assert_eq!(l.get(Split::Train, s(2), Some(Label::Covid)), 39);
        assert_eq!(l.get(Split::Val, s(2), Some(Label::Covid)), 0);
        assert_eq!(l.split_total(Split::Test), 1488);
        assert_eq!(l.total(Split::Train, Some(Label::NonCovid)), 660);
    }

    #[test]
    fn empty_corrections_are_identity() {
        let l = official_ledger();
        assert_eq!(apply_corrections(&l, &[]).unwrap(), l);
    }

    #[test]
    fn negative_counts_rejected() {
        let rec = CorrectionRecord {
            kind: CorrectionKind::Exclusion,
            target: "x".into(),
            cell: Cell::new(Split::Val, s(2), Some(Label::Covid)),
            delta: -1,
            note: String::new(),
        };
        assert!(matches!(apply_corrections(&official_ledger(), &[rec]), Err(Error::Ledger(_))));
    }

    #[test]
    fn test_cells_must_be_unlabeled() {
        let mut l = SplitLedger::new();
        assert!(l.set(Cell::new(Split::Test, s(0), Some(Label::Covid)), 1).is_err());
    }

    #[test]
    fn scaling_rounds_half_up() {
        let mut l = SplitLedger::new();
        l.set(Cell::new(Split::Train, s(0), Some(Label::Covid)), 175).unwrap();
        l.set(Cell::new(Split::Train, s(1), Some(Label::Covid)), 164).unwrap();
        l.set(Cell::new(Split::Train, s(2), Some(Label::Covid)), 4).unwrap();
        let t = l.scaled_percent(10);
        assert_eq!(t.get(Split::Train, s(0), Some(Label::Covid)), 18);
        assert_eq!(t.get(Split::Train, s(1), Some(Label::Covid)), 16);
        assert_eq!(t.get(Split::Train, s(2), Some(Label::Covid)), 0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let l = revised_ledger();
        l.write_csv(&p).unwrap();
        let back = SplitLedger::read_csv(&p).unwrap();
        assert_eq!(back.fingerprint(), l.fingerprint());
        let c = dir.path().join("c.csv");
        write_corrections(&c, &builtin_corrections()).unwrap();
        assert_eq!(read_corrections(&c).unwrap(), builtin_corrections());
    }

    #[test]
    fn malformed_corrections_rejected() {
        assert!(parse_corrections("kind,target\nexclusion,a\n").is_err());
        let bad = "kind,target,split,source,class,delta,note\nteleport,a,train,0,0,1,x\n";
        assert!(parse_corrections(bad).is_err());
    }

    #[test]
    fn empty_folder_rejected() {
        let f = FolderManifest {
            folder_id: "ct_scan_8".into(),
            split: Split::Train,
            source: s(0),
            label: Some(Label::NonCovid),
            subfolders: vec![],
        };
        assert!(expand_multi_sample_folder(&f).is_err());
    }
}
