//! Writes a small synthetic dataset and recounts it from the manifest.
//!
//! `cargo run --example synth_dataset -- [out_dir] [percent]`

use std::path::PathBuf;

use sourceaware::ledger::Split;
use sourceaware::synth::{default_synth_ledger, generate_dataset, SynthConfig};
use sourceaware::volume::{Label, SourceId};

fn main() -> sourceaware::Result<()> {
    let mut args = std::env::args().skip(1);
    let tmp = tempfile::tempdir().expect("tempdir");
    let out: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let percent: u64 = args.next().map(|s| s.parse().expect("percent")).unwrap_or(3);

    let ledger = default_synth_ledger(percent);
    let ds = generate_dataset(&ledger, &SynthConfig::default(), 7, &out)?;
    println!("{} rows written to {}", ds.manifest.rows.len(), out.display());

    // test sources are hidden in the manifest, so only labeled cells and the
    // test total can be compared
    let recount = ds.manifest.recount();
    assert_eq!(recount.split_total(Split::Test), ledger.split_total(Split::Test));
    for split in [Split::Train, Split::Val] {
        for class in [Label::Covid, Label::NonCovid] {
            let row: Vec<u64> = SourceId::ALL.iter().map(|s| recount.get(split, Some(*s), Some(class))).collect();
            let want: Vec<u64> = SourceId::ALL.iter().map(|s| ledger.get(split, Some(*s), Some(class))).collect();
            assert_eq!(row, want);
            println!("  {:<5} {:<9} {:?}", split.as_str(), format!("{class:?}"), row);
        }
    }
    let positives = ds.truth.iter().filter(|t| t.label == Label::Covid).count();
    println!(
        "  test: {} active, {} excluded, {positives} hidden positives",
        ds.manifest.active(Split::Test).count(),
        ds.manifest.excluded_ids().len()
    );
    Ok(())
}
