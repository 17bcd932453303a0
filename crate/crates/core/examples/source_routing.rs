//! Hierarchical fusion on hand-made expert outputs: variants vote within a
//! stage, then the predicted source picks the route.

use sourceaware::ensemble::{fuse, VoteConfig};
use sourceaware::predictions::{ExpertPrediction, SourcePrediction, Stage};

fn pred(scan: &str, stage: Stage, variant: &str, p_covid: f64) -> ExpertPrediction {
    ExpertPrediction::new(scan, [1.0 - p_covid, p_covid], stage, variant).unwrap()
}

fn main() -> sourceaware::Result<()> {
    // scan_a comes from source 0: only the volumetric expert decides.
    // scan_b: the stage 2b variants split, their mean (0.65) breaks the tie.
    // scan_c: stage 1 is outvoted by the two slice experts.
    let scans = [
        ("scan_a", [0.85, 0.05, 0.05, 0.05], [0.20, 0.90, 0.80, 0.70]),
        ("scan_b", [0.05, 0.80, 0.10, 0.05], [0.30, 0.70, 0.40, 0.90]),
        ("scan_c", [0.10, 0.10, 0.10, 0.70], [0.60, 0.20, 0.30, 0.45]),
    ];
    let columns = [
        (Stage::Volume3D, "orig_lung"),
        (Stage::Slice, "crs"),
        (Stage::Context, "trans_last2"),
        (Stage::Context, "flat_cls"),
    ];
    let files: Vec<Vec<ExpertPrediction>> = columns
        .iter()
        .enumerate()
        .map(|(c, (stage, variant))| scans.iter().map(|(id, _, p)| pred(id, *stage, variant, p[c])).collect())
        .collect();
    let sources: Vec<SourcePrediction> = scans
        .iter()
        .map(|(id, s, _)| SourcePrediction::from_probs(*id, *s))
        .collect::<sourceaware::Result<_>>()?;

    for f in fuse(&files, &sources, &VoteConfig::default())? {
        println!(
            "{}: source {} -> {:<17} stage labels {:?} => {:?} (p_covid {:.3}, tie {})",
            f.scan_id,
            f.predicted_source.index(),
            f.route.as_str(),
            f.stage_labels.map(|l| l.index()),
            f.label,
            f.p_covid,
            f.tie_flag
        );
    }
    Ok(())
}
