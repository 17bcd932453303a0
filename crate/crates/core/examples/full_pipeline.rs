//! Every command in sequence on the default synthetic dataset, the same as
//! running the CLI subcommands one after another.
//!
//! `cargo run --release --example full_pipeline -- [workdir] [percent]`

use std::path::PathBuf;
use std::time::Instant;

use sourceaware::config::RunConfig;
use sourceaware::pipeline::{run_all, Layout};

fn main() -> sourceaware::Result<()> {
    let mut args = std::env::args().skip(1);
    let tmp = tempfile::tempdir().expect("tempdir");
    let root: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let mut cfg = RunConfig::default();
    if let Some(p) = args.next() {
        cfg.synth.percent = p.parse().expect("percent");
    }
    cfg.paths.data_root = root.join("data");
    cfg.paths.output_root = root.join("run");

    let start = Instant::now();
    let eval = run_all(&cfg)?;
    println!("finished in {:.0?}", start.elapsed());
    for (split, m) in &eval.final_metrics {
        println!("{split:<5} ACC {:.4}  Macro-F1 {:.4}  AUC {:.4}", m.acc, m.macro_f1, m.auc);
    }
    println!("source {:?}", eval.source);
    println!("stage 1 source-0 accuracy {:?}", eval.stage1_source0_accuracy);
    println!("routes {:?}", eval.routes);
    println!("report at {}", Layout::new(&cfg).root.join("report.md").display());
    Ok(())
}
