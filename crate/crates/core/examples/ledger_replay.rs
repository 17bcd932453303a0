//! Replays the split bookkeeping: official counts, the built-in corrections,
//! and the scaled ledger the default synthetic dataset is drawn from.

use sourceaware::ledger::{builtin_corrections, official_ledger, revised_ledger, Split};
use sourceaware::volume::{Label, SourceId};

fn print_table(title: &str, ledger: &sourceaware::ledger::SplitLedger) {
    println!("{title}");
    println!("  {:<6} {:<10} {:>5} {:>5} {:>5} {:>5} {:>6}", "split", "class", "S0", "S1", "S2", "S3", "total");
    for split in [Split::Train, Split::Val] {
        for class in [Label::Covid, Label::NonCovid] {
            let row: Vec<u64> = SourceId::ALL.iter().map(|s| ledger.get(split, Some(*s), Some(class))).collect();
            println!(
                "  {:<6} {:<10} {:>5} {:>5} {:>5} {:>5} {:>6}",
                split.as_str(),
                format!("{class:?}"),
                row[0],
                row[1],
                row[2],
                row[3],
                ledger.total(split, Some(class))
            );
        }
    }
    let test: Vec<u64> = SourceId::ALL.iter().map(|s| ledger.get(Split::Test, Some(*s), None)).collect();
    println!(
        "  test   unknown-src {:>5} | by source {:?} | total {}",
        ledger.get(Split::Test, None, None),
        test,
        ledger.split_total(Split::Test)
    );
}

fn main() {
    print_table("official", &official_ledger());
    println!("\ncorrections:");
    for c in builtin_corrections() {
        println!("  {:<22} {:<22} {:+5}  {}", c.kind.as_str(), c.target, c.delta, c.note);
    }
    let revised = revised_ledger();
    println!();
    print_table("revised", &revised);
    println!("\nfingerprint {}", revised.fingerprint());
    println!();
    print_table("scaled to 10%", &revised.scaled_percent(10));
}
