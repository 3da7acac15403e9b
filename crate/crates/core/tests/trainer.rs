use melafuse::data::{Dataset, FeatureSchema, SynthConfig};
use melafuse::models::{CountMode, Part};
use melafuse::splitter::group_kfold;
use melafuse::tensor::{finite_diff_grad, relative_error, SeededRng, Tape, Tensor};
use melafuse::trainer::*;
use melafuse::Error;

fn ce_value(logits: &Tensor, targets: &[u8], w: Option<[f64; 2]>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let p = tape.softmax(x).unwrap();
    let l = cross_entropy_loss(&mut tape, p, targets, w).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::new();
    let perfect = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let l = cross_entropy_loss(&mut tape, perfect, &[0, 1], None).unwrap();
    assert!(tape.value(l).item().unwrap() <= 1e-11);
    let uniform = tape.constant(Tensor::full(&[3, 2], 0.5).unwrap());
    let l = cross_entropy_loss(&mut tape, uniform, &[0, 1, 1], None).unwrap();
    assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(cross_entropy_loss(&mut tape, uniform, &[0, 1], None), Err(Error::Shape(_))));
}

#[test]
fn cross_entropy_gradient_through_softmax_matches_finite_differences() {
    let mut rng = SeededRng::new(3);
    let logits = Tensor::new(&[5, 2], (0..10).map(|_| rng.normal(0.0, 1.5)).collect()).unwrap();
    let targets = [0, 1, 1, 0, 1];
    for w in [None, Some([0.3, 2.0])] {
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone(), true);
        let p = tape.softmax(x).unwrap();
        let l = cross_entropy_loss(&mut tape, p, &targets, w).unwrap();
        let analytic = tape.backward(l).unwrap().take(x).unwrap();
        let numeric = finite_diff_grad(|t| Ok(ce_value(t, &targets, w)), &logits, 1e-5).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }
}

fn key() -> (Part, melafuse::models::ParamId) {
    let m = ModelConfig { image_size: 16, ..ModelConfig::default() }.build(3, 0).unwrap();
    let (part, id, _) = m.params().next().unwrap();
    (part, id)
}

#[test]
fn optimizer_update_rules() {
    let g = Tensor::from_slice(&[0.5, -2.0]);
    let mut p = Tensor::from_slice(&[1.0, 1.0]);
    let mut zero = Optimizer::new(OptimizerKind::Adam, 0.0);
    zero.update(key(), &mut p, &g).unwrap();
    assert_eq!(p.data(), &[1.0, 1.0]);

    let mut sgd = Optimizer::new(OptimizerKind::SgdMomentum, 0.1);
    sgd.update(key(), &mut p, &g).unwrap();
    assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, 1.0 + 0.1 * 2.0]);
    sgd.advance();
    let before = p.data().to_vec();
    sgd.update(key(), &mut p, &g).unwrap();
    // v = 0.9·g + g on the second step
    assert!((p.data()[0] - (before[0] - 0.1 * 1.9 * 0.5)).abs() < 1e-15);
    assert!(sgd.update(key(), &mut p, &Tensor::from_slice(&[1.0])).is_err());
}

#[test]
fn adam_minimises_a_convex_scalar() {
    let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
    let mut p = Tensor::from_slice(&[1.0]);
    for _ in 0..500 {
        let g = Tensor::from_slice(&[2.0 * p.data()[0]]);
        opt.update(key(), &mut p, &g).unwrap();
        opt.advance();
    }
    assert!(p.data()[0].abs() < 1e-3, "p = {}", p.data()[0]);
}

fn small_setup() -> (Dataset, ModelConfig, TrainConfig) {
    let ds = Dataset::synthetic(&SynthConfig::new(24, 0.3, 16, 5)).unwrap();
    let mc = ModelConfig { image_size: 16, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs: 2, batch_size: 8, folds: 2, seed: 9, ..TrainConfig::default() };
    (ds, mc, cfg)
}

fn run(ds: &Dataset, mc: &ModelConfig, cfg: &TrainConfig) -> KFoldOutcome {
    let a = group_kfold(&ds.groups(), cfg.folds).unwrap();
    let builder = |w: usize| mc.build(w, cfg.seed);
    train_kfold(&builder, ds, &a, cfg, &PipelineConfig::default(), &mut |_| {}).unwrap()
}

#[test]
fn kfold_covers_every_sample_once_and_is_deterministic() {
    let (ds, mc, cfg) = small_setup();
    let out = run(&ds, &mc, &cfg);
    assert_eq!(out.oof.len(), ds.len());
    for (k, o) in out.oof.iter().enumerate() {
        assert_eq!(o.image_name, ds.records[k].image_name);
    }
    assert_eq!(out.folds.len(), 2);
    for f in &out.folds {
        assert_eq!(f.stats.len(), 2 * cfg.epochs);
        assert!(f.stats.iter().all(|s| s.recall_benign.is_none_or(|r| (0.0..=1.0).contains(&r))));
        assert!(f.train_size >= ds.len() - f.val_size);
    }
    let again = run(&ds, &mc, &cfg);
    assert_eq!(out.report_text(), again.report_text());
    for (a, b) in out.folds.iter().zip(&again.folds) {
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let strip = |s: &[EpochStats]| s.iter().map(|e| (e.epoch, e.loss.to_bits(), e.acc.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a.stats), strip(&b.stats));
    }
}

#[test]
fn frozen_image_branch_stays_bit_identical() {
    let (ds, mc, cfg) = small_setup();
    let cfg = TrainConfig { freeze_image_branch: true, ..cfg };
    let out = run(&ds, &mc, &cfg);
    for f in &out.folds {
        let fresh = mc.build(f.checkpoint.tensors.iter().filter(|(n, _)| n.starts_with("fnn.layer0.dense.weight")).map(|(_, t)| t.shape()[0]).next().unwrap(), cfg.seed).unwrap();
        let mut changed_head = false;
        for (name, t) in &f.checkpoint.tensors {
            let (part, id) = fresh.find(name).unwrap();
            let orig = &fresh.graph(part).unwrap().store.get(id).value;
            match part {
                Part::Image => assert_eq!(orig.data(), t.data(), "{name} moved"),
                _ => changed_head |= orig.data() != t.data(),
            }
        }
        assert!(changed_head, "unfrozen parts should train");
        assert!(f.trainable_params < fresh.count_params(CountMode::RespectFreeze).trainable);
    }
}

#[test]
fn evaluation_is_repeatable_and_batch_independent() {
    let (ds, mc, _) = small_setup();
    let schema = FeatureSchema::fit(&ds.records);
    let model = mc.build(schema.width(), 1).unwrap();
    let (a, ra) = evaluate(&model, &ds.records, &ds.images, &schema, 32, 0.5).unwrap();
    let (b, rb) = evaluate(&model, &ds.records, &ds.images, &schema, 32, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let (c, _) = evaluate(&model, &ds.records, &ds.images, &schema, 1, 0.5).unwrap();
    for (x, y) in a.iter().zip(&c) {
        assert!((x.score - y.score).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_and_failure_modes() {
    let (ds, mc, cfg) = small_setup();
    let out = run(&ds, &mc, &cfg);
    let ckpt = &out.folds[0].checkpoint;
    let width = FeatureSchema::fit(&ds.records).width();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fold0.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(&loaded, ckpt);

    // rebuild the fold's model with the width it was trained at
    let w0 = ckpt.tensors.iter().find(|(n, _)| n == "fnn.layer0.dense.weight").unwrap().1.shape()[0];
    let mut model = mc.build(w0, 77).unwrap();
    loaded.apply(&mut model, false).unwrap();
    let again = Checkpoint::from_model(&model, &loaded.rng());
    assert_eq!(again.to_bytes(), ckpt.to_bytes());
    let schema = FeatureSchema::new(vec!["x".into(); w0 - 6]);
    let (s1, _) = evaluate(&model, &ds.records, &ds.images, &schema, 8, 0.5).unwrap();
    let mut model2 = mc.build(w0, 5).unwrap();
    Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap().apply(&mut model2, false).unwrap();
    let (s2, _) = evaluate(&model2, &ds.records, &ds.images, &schema, 8, 0.5).unwrap();
    assert_eq!(s1, s2);

    let mut bytes = ckpt.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    let mut bytes = ckpt.to_bytes();
    bytes[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("version")));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint at all, clearly"), Err(Error::Format(_))));
    std::fs::write(&path, &ckpt.to_bytes()[..100]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));

    let mut other = mc.build(width + 3, 5).unwrap();
    let before = Checkpoint::from_model(&other, &SeededRng::new(0)).to_bytes();
    assert!(matches!(ckpt.apply(&mut other, false), Err(Error::Compatibility(_))));
    assert_eq!(Checkpoint::from_model(&other, &SeededRng::new(0)).to_bytes(), before);
    let report = ckpt.apply(&mut other, true).unwrap();
    assert!(report.skipped.iter().any(|n| n == "fnn.layer0.dense.weight"));
    assert!(report.loaded.iter().any(|n| n == "stem.conv.weight"));
}

#[test]
fn backbone_checkpoint_partially_loads_into_a_fusion_model() {
    let (_, mc, _) = small_setup();
    let donor = ModelConfig { use_metadata: false, ..mc.clone() }.build(0, 42).unwrap();
    let ckpt = Checkpoint::from_graph(&donor.image, &SeededRng::new(1));
    let mut target = mc.build(10, 7).unwrap();
    assert!(matches!(ckpt.apply(&mut target, false), Err(Error::Compatibility(_))));
    let head_before: Vec<Vec<f64>> = target.head.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    let report = ckpt.apply(&mut target, true).unwrap();
    assert_eq!(report.loaded.len(), donor.image.store.len());
    assert!(report.skipped.is_empty());
    assert!(report.untouched.iter().all(|n| n.starts_with("fnn.") || n.starts_with("head.")));
    let head_after: Vec<Vec<f64>> = target.head.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    assert_eq!(head_before, head_after);
    for (_, p) in donor.image.store.iter() {
        let (part, id) = target.find(&p.name).unwrap();
        assert_eq!(target.graph(part).unwrap().store.get(id).value.data(), p.value.data());
    }
}

#[test]
fn epoch_csv_layout_and_config_validation() {
    let stats = vec![EpochStats {
        fold: 0,
        epoch: 1,
        split: Split::Val,
        loss: 0.5,
        acc: 0.75,
        recall_benign: Some(1.0),
        recall_malignant: None,
        seconds: 1.25,
    }];
    let mut buf = Vec::new();
    write_epoch_csv(&mut buf, &stats).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "epoch,split,loss,acc,recall_benign,recall_malignant,seconds\n1,val,0.5,0.75,1,undefined,1.250\n"
    );
    assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
