//! Trains the volumetric expert on a handful of in-memory phantoms and
//! scores held-out scans.

use sourceaware::dataset::{LabeledScan, MemoryViewStore};
use sourceaware::expert3d::{predict_stage1, train_stage1, Stage1Config};
use sourceaware::prep::{PrepConfig, ScanView};
use sourceaware::rng::substream;
use sourceaware::synth::{default_lesions, default_profiles, generate_scan};
use sourceaware::train::TrainConfig;
use sourceaware::volume::{Label, ScanVolume, SourceId};

fn phantoms(tag: &str, per_cell: usize) -> sourceaware::Result<(Vec<ScanVolume>, Vec<LabeledScan>)> {
    let (profiles, lesions) = (default_profiles(), default_lesions());
    let (mut scans, mut refs) = (Vec::new(), Vec::new());
    for s in SourceId::ALL {
        for label in [Label::Covid, Label::NonCovid] {
            for i in 0..per_cell {
                let id = format!("{tag}_{}_{}_{i}", s.index(), label.index());
                let mut rng = substream(3, &[&id]);
                let g = generate_scan(&profiles[s.index()], label, &lesions[s.index()], &mut rng)?;
                scans.push(ScanVolume { scan_id: id.clone(), ..g.scan });
                refs.push(LabeledScan { scan_id: id, label, source: Some(s) });
            }
        }
    }
    Ok((scans, refs))
}

fn main() -> sourceaware::Result<()> {
    let (mut scans, train) = phantoms("train", 3)?;
    let (val_scans, val) = phantoms("val", 1)?;
    scans.extend(val_scans);
    let views = MemoryViewStore::from_raw(&scans, &[ScanView::Orig, ScanView::Lung], &PrepConfig::default())?;

    let cfg = Stage1Config {
        train: TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        },
        augment_probability: 0.25,
        ..Stage1Config::default()
    };
    let (model, log) = train_stage1(&views, &train, &val, &cfg, 11)?;
    for e in &log.epochs {
        println!("epoch {} loss {:.4} val {:?}", e.epoch, e.mean_loss, e.val.map(|v| v.macro_f1));
    }
    println!("best epoch {:?}, {} steps", log.best_epoch, log.steps);
    for s in &val {
        let p = predict_stage1(&model, cfg.setting, &views, &s.scan_id, cfg.setting.as_str())?;
        println!("  {:<14} truth {:?} p_covid {:.3}", s.scan_id, s.label, p.p_covid());
    }
    Ok(())
}
