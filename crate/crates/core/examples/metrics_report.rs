//! Scores a toy prediction set: accuracy, macro-F1, AUC and per-source F1
//! under both per-source conventions.

use sourceaware::metrics::{auc, macro_f1, MetricsReport, PerSourceMode};
use sourceaware::volume::SourceId;

fn main() -> sourceaware::Result<()> {
    let labels = [1, 1, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1];
    let scores = [0.92, 0.81, 0.45, 0.30, 0.55, 0.10, 0.77, 0.20, 0.66, 0.40, 0.05, 0.51];
    let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
    let sources: Vec<SourceId> = (0..labels.len()).map(|i| SourceId::ALL[i % 4]).collect();

    println!("macro-F1 {:.4}", macro_f1(&labels, &preds)?);
    println!("AUC      {:.4}", auc(&labels, &scores)?);
    for mode in [PerSourceMode::PositiveClass, PerSourceMode::Macro] {
        let r = MetricsReport::compute(&labels, &preds, &scores, &sources, mode)?;
        println!("\n{mode:?}\n{}", r.to_json());
    }
    Ok(())
}
