//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 8 and 9 run the full synthetic pipeline twice.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sourceaware::config::RunConfig;
use sourceaware::dataset::{LabeledScan, MemoryViewStore};
use sourceaware::ensemble::{
    cross_expert_vote, route_and_predict, within_stage_vote, Route, StageVote, VoteConfig, WithinStageRule,
};
use sourceaware::expert3d::{
    logits_of, loss_ce, train_stage1_observed, AugmentEvent, Backbone3DConfig, InputSetting, Stage1Config, Volume3DModel,
};
use sourceaware::expert_ctx::{build_stage2b, fit_stage2b, ContextConfig, ContextVariant};
use sourceaware::expert_slice::{loss_slice, mean_probs, slice_loss_and_grad, SliceEncoder, SliceEncoderConfig, SliceModel};
use sourceaware::ledger::{
    apply_corrections, builtin_corrections, official_ledger, predicted_test_distribution, Split,
};
use sourceaware::metrics::{auc, macro_f1};
use sourceaware::pipeline::{run_all, Layout};
use sourceaware::predictions::{ExpertPrediction, SourcePrediction, Stage};
use sourceaware::prep::{canonicalize_2d, canonicalize_3d, trim_slices, PrepConfig, ScanView, CANONICAL_3D};
use sourceaware::source::{build_source_clf, fit_source_head};
use sourceaware::train::TrainConfig;
use sourceaware::volume::{Label, ScanVolume, SourceId, Volume};
use sourceaware::Result;
use sourceaware_nn::{Gradients, ParamStore, Tensor};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> std::result::Result<(), String> {
    let t = start.elapsed();
    ensure(t < budget, || format!("took {:.2?}, budget {:.0?}", t, budget))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn param_count(store: &ParamStore) -> usize {
    store.iter().map(|(_, p)| p.value.len()).sum()
}

// ---------------------------------------------------------------------------

fn ledger_replay() -> Outcome {
    let start = Instant::now();
    let revised = apply_corrections(&official_ledger(), &builtin_corrections()).map_err(err)?;
    let s = |i: u8| Some(SourceId::new(i).unwrap());
    let expected: [(Split, Label, [u64; 4]); 4] = [
        (Split::Train, Label::Covid, [175, 175, 39, 175]),
        (Split::Train, Label::NonCovid, [230, 165, 165, 165]),
        (Split::Val, Label::Covid, [43, 43, 39, 42]),
        (Split::Val, Label::NonCovid, [45, 45, 45, 45]),
    ];
    for (split, class, row) in expected {
        for (i, want) in row.iter().enumerate() {
            let got = revised.get(split, s(i as u8), Some(class));
            ensure(got == *want, || format!("{split:?}/S{i}/{class:?}: {got} != {want}"))?;
        }
    }
    let totals = [
        (Split::Train, Label::Covid, 564),
        (Split::Train, Label::NonCovid, 725),
        (Split::Val, Label::Covid, 167),
        (Split::Val, Label::NonCovid, 180),
    ];
    for (split, class, want) in totals {
        let got = revised.total(split, Some(class));
        ensure(got == want, || format!("{split:?}/{class:?} total {got} != {want}"))?;
    }

    // 549 predicted source-0 scans, one of them the dropped multi-sample folder
    let mut preds = Vec::new();
    let mut n = 0;
    for (src, count) in [(0usize, 548usize), (1, 314), (2, 245), (3, 380)] {
        for _ in 0..count {
            let mut p = [0.0; 4];
            p[src] = 1.0;
            preds.push(SourcePrediction::from_probs(format!("ct_scan_{}", 10_000 + n), p).map_err(err)?);
            n += 1;
        }
    }
    preds.push(SourcePrediction::from_probs("ct_scan_492", [1.0, 0.0, 0.0, 0.0]).map_err(err)?);
    ensure(preds.len() == 1488, || format!("{} test predictions", preds.len()))?;
    let dist = predicted_test_distribution(&preds, &["ct_scan_492"]).map_err(err)?;
    ensure(dist == [548, 314, 245, 380], || format!("distribution {dist:?}"))?;
    ensure(dist.iter().sum::<u64>() == 1487, || "distribution does not sum to 1487".into())?;
    for (i, want) in dist.iter().enumerate() {
        let got = revised.get(Split::Test, s(i as u8), None);
        ensure(got == *want, || format!("revised test S{i}: {got} != {want}"))?;
    }
    ensure(revised.split_total(Split::Test) == 1487, || format!("test total {}", revised.split_total(Split::Test)))?;
    within_budget(start, Duration::from_secs(1))?;
    Ok(format!("16 train/val cells, 4 totals, test 548/314/245/380 in {:.2?}", start.elapsed()))
}

// ---------------------------------------------------------------------------

fn small_scan(id: &str, dims: [usize; 3], seed: u64, label: Label) -> ScanVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Volume::from_fn(dims, |_, _, _| rng.random_range(0.0f32..1.0));
    ScanVolume::new(id, v, Some(SourceId::new((seed % 4) as u8).unwrap()), Some(label)).unwrap()
}

fn preprocessing_rules() -> Outcome {
    let start = Instant::now();
    for (slices, want) in [(150, 150), (151, 107), (200, 140)] {
        let scan = small_scan("t", [slices, 2, 2], 1, Label::Covid);
        let out = trim_slices(&scan, 150, 0.15).map_err(err)?;
        ensure(out.voxels.slices() == want, || format!("S={slices} -> {}, want {want}", out.voxels.slices()))?;
        if slices > 150 {
            let lo = (slices as f64 * 0.15).floor() as usize;
            ensure(out.voxels.slice(0) == scan.voxels.slice(lo), || format!("S={slices}: first kept slice is not {lo}"))?;
        }
    }
    let scan = small_scan("c", [30, 40, 50], 2, Label::Covid);
    let c3 = canonicalize_3d(&scan).map_err(err)?;
    ensure(c3.volume().dims() == [128, 256, 256], || format!("3D shape {:?}", c3.volume().dims()))?;
    let c2 = canonicalize_2d(&scan).map_err(err)?;
    ensure(c2.volume().dims() == [24, 448, 448], || format!("2D shape {:?}", c2.volume().dims()))?;

    // Augmentation log: every augmented scan reports one parameter set for
    // all of its output slices.
    let scans: Vec<ScanVolume> = (0..3)
        .map(|i| small_scan(&format!("s{i}"), [20, 24, 24], 10 + i, if i % 2 == 0 { Label::Covid } else { Label::NonCovid }))
        .collect();
    let views = MemoryViewStore::from_raw(&scans, &[ScanView::Orig, ScanView::Lung], &PrepConfig::default()).map_err(err)?;
    let train: Vec<LabeledScan> = scans
        .iter()
        .map(|s| LabeledScan {
            scan_id: s.scan_id.clone(),
            label: s.label.unwrap(),
            source: s.source,
        })
        .collect();
    let cfg = Stage1Config {
        backbone: Backbone3DConfig {
            input_dims: [4, 8, 8],
            widths: vec![2],
            blocks_per_stage: 1,
            kernel: 3,
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        },
        setting: InputSetting::OrigLung,
        augment_probability: 1.0,
        ..Stage1Config::default()
    };
    let mut events: Vec<AugmentEvent> = Vec::new();
    train_stage1_observed(&views, &train, &[], &cfg, 3, &mut |e| events.push(e.clone())).map_err(err)?;
    let mut groups: BTreeMap<(usize, String, ScanView), Vec<&AugmentEvent>> = BTreeMap::new();
    for e in &events {
        groups.entry((e.epoch, e.scan_id.clone(), e.view)).or_default().push(e);
    }
    let want_groups = cfg.train.epochs * train.len() * 2;
    ensure(groups.len() == want_groups, || format!("{} augmentation calls, want {want_groups}", groups.len()))?;
    for (key, evs) in &groups {
        let slices: Vec<usize> = evs.iter().map(|e| e.slice).collect();
        ensure(slices == (0..CANONICAL_3D[0]).collect::<Vec<_>>(), || format!("{key:?}: slice log {} entries", slices.len()))?;
        ensure(evs.iter().all(|e| e.params == evs[0].params), || format!("{key:?}: parameters vary across slices"))?;
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!(
        "trim 150/151/200 -> 150/107/140, shapes exact, {} scan-level augmentations x 128 slices in {:.2?}",
        groups.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------

fn tiny_encoder(blocks: usize) -> SliceEncoderConfig {
    SliceEncoderConfig {
        grid: 8,
        patch: 4,
        dim: 8,
        heads: 2,
        ff_mult: 2,
        blocks,
    }
}

fn randomize_heads(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains("head")).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = random_tensor(rng, &shape, 0.8);
    }
}

fn slice_semantics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = SliceModel::new(&tiny_encoder(1), &mut rng).map_err(err)?;
    randomize_heads(&mut model.store, &mut rng);
    let mut worst: f64 = 0.0;
    for k in [1usize, 12, 24] {
        let slices: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut rng, &[4, 16], 1.0)).collect();
        let scan = model.scan_probability(&slices).map_err(err)?;
        let mut mean = [0.0; 2];
        for s in &slices {
            let p = model.per_slice_probs(std::slice::from_ref(s)).map_err(err)?[0];
            mean[0] += p[0] / k as f64;
            mean[1] += p[1] / k as f64;
        }
        let d = (scan[0] - mean[0]).abs().max((scan[1] - mean[1]).abs());
        worst = worst.max(d);
        ensure(d < 1e-6, || format!("K={k}: scan probability off by {d:e}"))?;

        let label = k % 2;
        let mut grads = Gradients::new(&model.store);
        let l = slice_loss_and_grad(&model, &model.store, &slices, 0, label, &mut grads);
        let want = -mean[label].ln();
        ensure((l - want).abs() < 1e-6, || format!("K={k}: slice loss {l} != -ln(mean) {want}"))?;
    }
    let rows = [[0.1, 0.9], [0.9, 0.1]];
    let mean_then_log = loss_slice(mean_probs(&rows).map_err(err)?, 1).map_err(err)?;
    let log_then_mean = rows.iter().map(|r| loss_slice(*r, 1).unwrap()).sum::<f64>() / 2.0;
    ensure((mean_then_log - 0.6931).abs() < 1e-3, || format!("mean-then-log {mean_then_log}"))?;
    ensure((log_then_mean - 1.2040).abs() < 1e-3, || format!("log-then-mean {log_then_mean}"))?;
    within_budget(start, Duration::from_secs(5))?;
    Ok(format!(
        "max deviation {worst:.1e} over K=1/12/24; losses {mean_then_log:.4} vs {log_then_mean:.4} in {:.2?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------

struct GradReport {
    checked: usize,
    flat: usize,
    worst: f64,
}

/// Central differences on random trainable coordinates. Coordinates whose
/// analytic and numeric gradients are both below `1e-7` have no meaningful
/// relative error; they are checked in absolute terms and not counted.
fn grad_check(
    store: &mut ParamStore,
    analytic: &Gradients,
    loss: &dyn Fn(&ParamStore) -> f64,
    want: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<GradReport, String> {
    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if p.trainable {
            coords.extend((0..p.value.len()).map(|j| (id, j)));
        }
    }
    coords.shuffle(rng);
    let h = 1e-5;
    let mut rep = GradReport {
        checked: 0,
        flat: 0,
        worst: 0.0,
    };
    for (id, j) in coords {
        if rep.checked >= want {
            break;
        }
        let a = analytic.get(id).map_or(0.0, |t| t.data()[j]);
        let orig = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = orig + h;
        let fp = loss(store);
        store.value_mut(id).data_mut()[j] = orig - h;
        let fm = loss(store);
        store.value_mut(id).data_mut()[j] = orig;
        let n = (fp - fm) / (2.0 * h);
        let scale = a.abs().max(n.abs());
        if scale < 1e-7 {
            ensure((a - n).abs() < 1e-9, || format!("flat coordinate: analytic {a:e}, numeric {n:e}"))?;
            rep.flat += 1;
            continue;
        }
        let rel = (a - n).abs() / scale;
        let name = store.get(id).name.clone();
        ensure(rel < 1e-4, || format!("{name}[{j}]: analytic {a:e}, numeric {n:e}, rel {rel:e}"))?;
        rep.worst = rep.worst.max(rel);
        rep.checked += 1;
    }
    ensure(rep.checked >= want, || format!("only {} informative coordinates", rep.checked))?;
    Ok(rep)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();

    // Cross-entropy on the 3D model.
    let cfg = Backbone3DConfig {
        input_dims: [4, 8, 8],
        widths: vec![2, 3],
        blocks_per_stage: 1,
        kernel: 3,
    };
    let mut m3 = Volume3DModel::new(&cfg, &mut rng).map_err(err)?;
    randomize_heads(&mut m3.store, &mut rng);
    let pooled = Volume::from_fn(cfg.input_dims, |_, _, _| rng.random_range(0.0f32..1.0));
    let input = sourceaware::dataset::volume_input(&pooled);
    let mut grads = Gradients::new(&m3.store);
    m3.loss_and_grad(&pooled, 1, &mut grads).map_err(err)?;
    let n3 = param_count(&m3.store);
    let mut store = m3.store.clone();
    let model = m3.clone();
    let f = |s: &ParamStore| loss_ce(&logits_of(&model, s, &input), 1).unwrap();
    let r = grad_check(&mut store, &grads, &f, 120, &mut rng).map_err(|e| format!("3D cross-entropy: {e}"))?;
    ensure(n3 <= 5000, || format!("3D model has {n3} parameters"))?;
    out.push(format!("CE {n3}p {}c rel<= {:.1e}", r.checked, r.worst));

    // Slice-mean loss on the slice model.
    let mut sm = SliceModel::new(&tiny_encoder(1), &mut rng).map_err(err)?;
    randomize_heads(&mut sm.store, &mut rng);
    let slices: Vec<Tensor> = (0..5).map(|_| random_tensor(&mut rng, &[4, 16], 1.0)).collect();
    let mut grads = Gradients::new(&sm.store);
    slice_loss_and_grad(&sm, &sm.store, &slices, 0, 0, &mut grads);
    let n2 = param_count(&sm.store);
    let mut store = sm.store.clone();
    let f = |s: &ParamStore| slice_loss_and_grad(&sm, s, &slices, 0, 0, &mut Gradients::new(s));
    let r = grad_check(&mut store, &grads, &f, 120, &mut rng).map_err(|e| format!("slice-mean loss: {e}"))?;
    ensure(n2 <= 5000, || format!("slice model has {n2} parameters"))?;
    out.push(format!("slice {n2}p {}c rel<= {:.1e}", r.checked, r.worst));

    // Context loss; every parameter opened up so the encoder path is checked too.
    let base = SliceModel::new(&tiny_encoder(2), &mut rng).map_err(err)?;
    let ctx_cfg = ContextConfig {
        blocks: 1,
        heads: 2,
        ff_mult: 2,
        positional: true,
        slices: 4,
    };
    let mut cm = build_stage2b(&base, ContextVariant::TransLast2, &ctx_cfg, &mut rng).map_err(err)?;
    randomize_heads(&mut cm.store, &mut rng);
    cm.store.set_all_trainable(true);
    let tokens: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[4, 16], 1.0)).collect();
    let mut grads = Gradients::new(&cm.store);
    cm.loss_and_grad(&cm.store, &tokens, 0, 1, &mut grads);
    let nc = param_count(&cm.store);
    let mut store = cm.store.clone();
    let f = |s: &ParamStore| cm.loss_and_grad(s, &tokens, 0, 1, &mut Gradients::new(s));
    let r = grad_check(&mut store, &grads, &f, 120, &mut rng).map_err(|e| format!("context loss: {e}"))?;
    ensure(nc <= 5000, || format!("context model has {nc} parameters"))?;
    out.push(format!("context {nc}p {}c rel<= {:.1e}", r.checked, r.worst));

    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("{} in {:.2?}", out.join("; "), start.elapsed()))
}

// ---------------------------------------------------------------------------

fn changed(before: &ParamStore, after: &ParamStore) -> Vec<(String, bool, bool)> {
    before
        .iter()
        .zip(after.iter())
        .map(|((_, a), (_, b))| {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            (a.name.clone(), a.trainable, !same)
        })
        .collect()
}

fn freeze_contracts() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let steps = 10;
    let train_cfg = TrainConfig {
        epochs: 20,
        batch_size: 1,
        learning_rate: 1e-2,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let labeled: Vec<LabeledScan> = (0..4)
        .map(|i| LabeledScan {
            scan_id: format!("s{i}"),
            label: Label::from_index(i % 2).unwrap(),
            source: Some(SourceId::new(i as u8).unwrap()),
        })
        .collect();

    // Stage 2b: encoder layers 0..n-2 frozen, last two trainable.
    let base = SliceModel::new(&tiny_encoder(3), &mut rng).map_err(err)?;
    let ctx_cfg = ContextConfig {
        blocks: 1,
        heads: 2,
        ff_mult: 2,
        positional: true,
        slices: 4,
    };
    let mut cm = build_stage2b(&base, ContextVariant::TransLast2, &ctx_cfg, &mut rng).map_err(err)?;
    let layers = cm.encoder.num_layers();
    let frozen_prefixes: Vec<String> = (0..layers - 2).map(SliceEncoder::layer_prefix).collect();
    for (_, p) in cm.store.iter() {
        let should_freeze = frozen_prefixes.iter().any(|f| p.name.starts_with(f.as_str()));
        ensure(p.trainable != should_freeze, || format!("stage 2b: {} trainable={}", p.name, p.trainable))?;
    }
    let tokens: Vec<Vec<Tensor>> = (0..4)
        .map(|_| (0..4).map(|_| random_tensor(&mut rng, &[4, 16], 1.0)).collect())
        .collect();
    let before = cm.store.clone();
    let log = fit_stage2b(&mut cm, &tokens, &labeled, &[], &[], &train_cfg, 1).map_err(err)?;
    ensure(log.steps == steps, || format!("stage 2b ran {} steps", log.steps))?;
    let diff = changed(&before, &cm.store);
    if let Some((n, _, _)) = diff.iter().find(|(_, t, c)| !t && *c) {
        return Err(format!("stage 2b frozen parameter {n} changed"));
    }
    let moved_2b = diff.iter().filter(|(_, t, c)| *t && *c).count();
    ensure(moved_2b > 0, || "stage 2b: no trainable parameter changed".into())?;
    let frozen_2b = diff.iter().filter(|(_, t, _)| !t).count();

    // Stage 3: the copied backbone stays fixed while the head trains.
    let m3 = Volume3DModel::new(
        &Backbone3DConfig {
            input_dims: [4, 8, 8],
            widths: vec![2, 3],
            blocks_per_stage: 1,
            kernel: 3,
        },
        &mut rng,
    )
    .map_err(err)?;
    let mut sm = build_source_clf(&m3).map_err(err)?;
    let vols: Vec<Volume> = (0..8)
        .map(|_| Volume::from_fn([4, 8, 8], |_, _, _| rng.random_range(0.0f32..1.0)))
        .collect();
    let feats: Vec<Tensor> = vols.iter().map(|v| sm.features(v)).collect::<Result<_>>().map_err(err)?;
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    sm.fit_normalization(&feats).map_err(err)?;
    let probe_before = sm.features(&vols[0]).map_err(err)?;
    let before = sm.store.clone();
    let log = fit_source_head(&mut sm, &feats, &labels, &[], &[], &train_cfg, 1).map_err(err)?;
    ensure(log.steps == steps, || format!("stage 3 ran {} steps", log.steps))?;
    let diff = changed(&before, &sm.store);
    for (name, trainable, moved) in &diff {
        let is_head = name.starts_with("source.head.");
        ensure(*trainable == is_head, || format!("stage 3: {name} trainable={trainable}"))?;
        ensure(is_head || !moved, || format!("stage 3 frozen parameter {name} changed"))?;
    }
    ensure(diff.iter().any(|(_, t, c)| *t && *c), || "stage 3: head did not change".into())?;
    let probe_after = sm.features(&vols[0]).map_err(err)?;
    ensure(
        probe_before.data().iter().zip(probe_after.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "stage 3 backbone features changed".into(),
    )?;
    for (_, a) in m3.store.iter().filter(|(_, p)| !p.name.starts_with("head.")) {
        let same = sm.store.find(&a.name).is_some_and(|id| sm.store.value(id) == &a.value);
        ensure(same, || format!("stage 3 backbone differs from stage 1 at {}", a.name))?;
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "2b: {frozen_2b} frozen tensors fixed, {moved_2b} trainable moved; 3: backbone fixed, head moved; {steps} steps each in {:.2?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------

fn label_of(b: bool) -> Label {
    if b {
        Label::Covid
    } else {
        Label::NonCovid
    }
}

fn vote(stage: Stage, scan: &str, label: Label, p: f64) -> StageVote {
    StageVote {
        scan_id: scan.into(),
        stage,
        label,
        mean_p_covid: p,
        tie_flag: false,
    }
}

fn voting_routing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let t: [Label; 3] = std::array::from_fn(|_| label_of(rng.random_bool(0.5)));
        let v = cross_expert_vote(t[0], t[1], t[2]);
        if t[0] == t[1] && t[1] == t[2] {
            ensure(v == t[0], || format!("unanimity broken on {t:?}"))?;
        }
        for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            ensure(cross_expert_vote(t[p[0]], t[p[1]], t[p[2]]) == v, || format!("permutation {p:?} of {t:?}"))?;
        }
        for i in 0..3 {
            let mut up = t;
            up[i] = Label::Covid;
            let w = cross_expert_vote(up[0], up[1], up[2]);
            ensure(w.index() >= v.index(), || format!("raising {t:?} at {i} lowered the vote"))?;
        }
    }

    let cfg = VoteConfig::default();
    let mut routes = [0usize; 2];
    for i in 0..1000 {
        let scan = format!("r{i}");
        let mut probs: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        let src = SourcePrediction::from_probs(&scan, probs).map_err(err)?;
        let labels: [Label; 3] = std::array::from_fn(|_| label_of(rng.random_bool(0.5)));
        let votes: Vec<StageVote> = [Stage::Volume3D, Stage::Slice, Stage::Context]
            .iter()
            .zip(labels)
            .map(|(&s, l)| vote(s, &scan, l, if l == Label::Covid { 0.7 } else { 0.3 }))
            .collect();
        let f = route_and_predict(&src, &votes, &cfg).map_err(err)?;
        if src.predicted_source.index() == 0 {
            ensure(f.route == Route::Stage1Only && f.label == labels[0], || format!("{scan}: source 0 not routed to stage 1"))?;
            routes[0] += 1;
        } else {
            let maj = cross_expert_vote(labels[0], labels[1], labels[2]);
            ensure(f.route == Route::ThreeExpertVote && f.label == maj, || format!("{scan}: expected three-expert vote"))?;
            routes[1] += 1;
        }
    }
    ensure(routes[0] > 0 && routes[1] > 0, || format!("routes not both exercised: {routes:?}"))?;

    let preds = [
        ExpertPrediction::new("a", [0.6, 0.4], Stage::Context, "trans_last2").map_err(err)?,
        ExpertPrediction::new("a", [0.1, 0.9], Stage::Context, "flat_cls").map_err(err)?,
    ];
    let v = within_stage_vote(&preds, WithinStageRule::MajorityThenMeanProb).map_err(err)?;
    ensure((v.mean_p_covid - 0.65).abs() < 1e-12 && v.label == Label::Covid, || format!("tie case gave {v:?}"))?;
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!(
        "10000 triples, routes {}/{} over 1000 scans, 0.65 tie -> label 1 in {:.2?}",
        routes[0],
        routes[1],
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------

fn pairwise_auc(labels: &[usize], scores: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let mut labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse dyadic scores on half the instances so exact ties are exercised
        let scores: Vec<f64> = if inst % 2 == 0 {
            labels.iter().map(|&l| (rng.random_range(0..16) + 2 * l) as f64 / 16.0).collect()
        } else {
            labels.iter().map(|&l| rng.random_range(0.0..1.0) + 0.3 * l as f64).collect()
        };
        let a = auc(&labels, &scores).map_err(err)?;
        let o = pairwise_auc(&labels, &scores);
        ensure((a - o).abs() < 1e-9, || format!("instance {inst}: auc {a} vs oracle {o}"))?;
        worst = worst.max((a - o).abs());
        let transforms: [fn(f64) -> f64; 3] = [|x| (3.0 * x).exp(), |x| x * x * x + x, |x| 2.0 * x - 7.0];
        for t in transforms {
            let ts: Vec<f64> = scores.iter().map(|&x| t(x)).collect();
            let b = auc(&labels, &ts).map_err(err)?;
            ensure((a - b).abs() < 1e-12, || format!("instance {inst}: transform changed auc {a} -> {b}"))?;
        }
    }
    let f1 = macro_f1(&[1, 1, 1, 0], &[1, 1, 0, 0]).map_err(err)?;
    ensure((f1 - 11.0 / 15.0).abs() < 1e-12, || format!("macro-F1 {f1}, want 0.7333"))?;
    let f1b = macro_f1(&[0, 1], &[1, 1]).map_err(err)?;
    ensure((f1b - 1.0 / 3.0).abs() < 1e-12, || format!("macro-F1 {f1b}, want 1/3"))?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "50 instances, max |auc - oracle| {worst:.1e}; macro-F1 {f1:.4} and {f1b:.4} in {:.2?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------

fn run_config(root: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.data_root = root.join("data");
    cfg.paths.output_root = root.join("out");
    cfg
}

fn end_to_end(first: &RunConfig) -> Outcome {
    let start = Instant::now();
    let eval = run_all(first).map_err(err)?;
    let elapsed = start.elapsed();
    let test = eval.final_metrics.get("test").ok_or("no test metrics")?;
    let src_acc = eval
        .source
        .get("test")
        .and_then(|v| v["ACC"].as_f64())
        .ok_or("no test source accuracy")?;
    let s0 = eval.stage1_source0_accuracy.ok_or("no stage 1 source-0 accuracy")?;
    let detail = format!(
        "test macro-F1 {:.4}, source ACC {:.4}, stage 1 S0 ACC {:.4}, {:.0?}",
        test.macro_f1, src_acc, s0, elapsed
    );
    ensure(test.macro_f1 >= 0.90, || format!("macro-F1 below 0.90: {detail}"))?;
    ensure(src_acc >= 0.90, || format!("source accuracy below 0.90: {detail}"))?;
    ensure(s0 >= 0.95, || format!("stage 1 source-0 accuracy below 0.95: {detail}"))?;
    ensure(elapsed < Duration::from_secs(30 * 60), || format!("over 30 minutes: {detail}"))?;
    Ok(detail)
}

fn determinism(first: &RunConfig, second: &RunConfig) -> Outcome {
    let a_path = Layout::new(first).final_predictions();
    let a = fs::read(&a_path).map_err(|e| format!("first run output missing ({e})"))?;
    run_all(second).map_err(err)?;
    let b = fs::read(Layout::new(second).final_predictions()).map_err(err)?;
    ensure(a == b, || {
        let n = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        format!("final predictions differ at byte {n}")
    })?;
    Ok(format!("{} bytes identical across two seeded runs", a.len()))
}

fn main() -> ExitCode {
    // libtest passes flags such as --nocapture; this runner has none
    let dir = tempfile::tempdir().expect("tempdir");
    let first = run_config(&dir.path().join("run_a"));
    let second = run_config(&dir.path().join("run_b"));

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("ledger replay", Box::new(ledger_replay)),
        ("preprocessing rules", Box::new(preprocessing_rules)),
        ("slice probability semantics", Box::new(slice_semantics)),
        ("gradient checks", Box::new(gradient_checks)),
        ("freeze contracts", Box::new(freeze_contracts)),
        ("voting and routing", Box::new(voting_routing)),
        ("metric oracles", Box::new(metric_oracles)),
        ("end-to-end synthetic run", Box::new(|| end_to_end(&first))),
        ("determinism", Box::new(|| determinism(&first, &second))),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
