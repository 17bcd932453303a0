//! Stage 2a on phantoms: warm-up, slice-mean training on contiguous
//! 12-slice windows, then inference over all 24 slices.

use sourceaware::dataset::{LabeledScan, MemoryViewStore, SliceResolution, ViewStore};
use sourceaware::expert_slice::{predict_stage2a_scan, train_stage2a, Stage2aConfig};
use sourceaware::prep::{PrepConfig, ScanView};
use sourceaware::rng::substream;
use sourceaware::synth::{generate_scan, SynthConfig};
use sourceaware::train::TrainConfig;
use sourceaware::volume::{Label, ScanVolume, SourceId};

fn main() -> sourceaware::Result<()> {
    let synth = SynthConfig::default();
    let mut scans = Vec::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in 0..24 {
        let s = SourceId::ALL[i % 4];
        let label = if (i / 4) % 2 == 0 { Label::Covid } else { Label::NonCovid };
        let id = format!("scan_{i:02}");
        let g = generate_scan(&synth.profiles[s.index()], label, &synth.lesions[s.index()], &mut substream(5, &[&id]))?;
        scans.push(ScanVolume { scan_id: id.clone(), ..g.scan });
        let r = LabeledScan { scan_id: id, label, source: Some(s) };
        if i < 16 {
            train.push(r)
        } else {
            val.push(r)
        }
    }
    let prep = PrepConfig::default();
    let views = MemoryViewStore::from_raw(&scans, &[ScanView::Lung], &prep)?;

    let mut cfg = Stage2aConfig::default();
    cfg.train = TrainConfig {
        epochs: 4,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    cfg.warmup.scans = 8;
    let (model, log) = train_stage2a(&views, &train, &val, &cfg, &synth, &prep, 2)?;
    for e in &log.epochs {
        println!("epoch {} loss {:.4} val F1 {:?}", e.epoch, e.mean_loss, e.val.map(|v| v.macro_f1));
    }

    let stack = views.stem2d(&val[0].scan_id, cfg.view, SliceResolution::Res24x448, cfg.encoder.grid)?;
    let per_slice = model.per_slice_probs(&model.tokens(&stack)?)?;
    let curve: Vec<String> = per_slice.iter().map(|p| format!("{:.2}", p[1])).collect();
    println!("{} per-slice p_covid: {}", val[0].scan_id, curve.join(" "));
    for s in &val {
        let p = predict_stage2a_scan(&model, &cfg, &views, &s.scan_id, "crs")?;
        println!("  {} truth {:?} scan p_covid {:.3}", s.scan_id, s.label, p.p_covid());
    }
    Ok(())
}
