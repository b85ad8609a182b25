use std::collections::BTreeMap;

use mtl_lab::architectures::Model;
use mtl_lab::experiments::{setup, Variant};
use mtl_lab::losses::{ScalarizationStrategy, Task};
use mtl_lab::metrics::{class_iou_report, detection_ap};
use mtl_lab::synthdata::{generate, Dataset, SceneSpec, Split};
use mtl_lab::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train, EvalOptions, OptimizerConfig, TrainConfig, Trainer,
};
use mtl_lab::{Error, Precision};

fn scene() -> SceneSpec {
    SceneSpec {
        seed: 11,
        image_size: 32,
        ..SceneSpec::default()
    }
}

fn data(n_train: usize, n_val: usize) -> Dataset {
    generate(&scene(), n_train, n_val, &BTreeMap::new()).unwrap()
}

fn model(variant: Variant, seed: u64) -> (Model, ScalarizationStrategy) {
    let s = setup(variant, &scene(), 4);
    (Model::new(s.architecture, seed).unwrap(), s.strategy)
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let ds = data(16, 4);
    let (mut m, strategy) = model(Variant::Mtl, 1);
    let init = m.clone();
    let mut cfg = TrainConfig::new(3, strategy);
    cfg.optimizer = OptimizerConfig::adam(0.0);
    let log = train(&mut m, &ds, &cfg).unwrap();
    assert_eq!(m, init);
    for r in &log[1..] {
        for (task, v) in &r.losses {
            let first = log[0].losses[task];
            assert!(((v - first) / first).abs() < 1e-5, "{task}: {v} vs {first}");
        }
    }
}

#[test]
fn tiny_segmentation_set_is_overfit() {
    let spec = SceneSpec {
        seed: 2,
        ..SceneSpec::default()
    };
    let ds = generate(&spec, 8, 0, &BTreeMap::new()).unwrap();
    let s = setup(Variant::StlSeg, &spec, 8);
    let mut m = Model::new(s.architecture, 0).unwrap();
    let log = train(&mut m, &ds, &TrainConfig::new(200, s.strategy)).unwrap();
    let ln_c = (spec.seg_classes.len() as f64).ln();
    let last = log.last().unwrap().losses["segmentation"];
    assert!(last < ln_c, "final loss {last} vs ln C {ln_c}");
    assert!(last < 0.5 * log[0].losses["segmentation"]);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let ds = data(16, 4);
    let run = || {
        let (mut m, strategy) = model(Variant::ThreeTaskProduct, 5);
        let mut cfg = TrainConfig::new(2, strategy);
        cfg.seed = 9;
        cfg.eval_every = 1;
        let log = train(&mut m, &ds, &cfg).unwrap();
        log.iter().map(|r| r.to_json_line()).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_weighted_decoder_keeps_its_initialization() {
    let ds = data(16, 4);
    let (mut m, _) = model(Variant::Mtl, 3);
    let init = m.clone();
    let weights: BTreeMap<String, f64> = [("segmentation".to_string(), 1.0), ("detection".to_string(), 0.0)]
        .into_iter()
        .collect();
    train(
        &mut m,
        &ds,
        &TrainConfig::new(2, ScalarizationStrategy::WeightedSum { weights }),
    )
    .unwrap();
    let mut encoder_moved = false;
    for (name, t) in m.params().iter() {
        let before = init.params().get(name).unwrap();
        if name.starts_with("detection.") {
            assert_eq!(t, before, "{name} changed");
        }
        if name.starts_with("encoder.") && t != before {
            encoder_moved = true;
        }
    }
    assert!(encoder_moved);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = data(16, 4);
    let (m, strategy) = model(Variant::AuxNet400, 4);
    let cfg = TrainConfig::new(3, strategy);

    let mut straight = Trainer::<f32>::new(&m, cfg.clone()).unwrap();
    straight.fit(&ds).unwrap();

    let mut first = Trainer::<f32>::new(&m, cfg.clone()).unwrap();
    first.run_epoch(&ds).unwrap();
    first.run_epoch(&ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&first.checkpoint().unwrap(), dir.path()).unwrap();
    let ckpt = load_checkpoint(dir.path(), Some(m.spec())).unwrap();
    assert_eq!(ckpt.epoch, 2);
    let mut resumed = Trainer::<f32>::resume(&ckpt, cfg).unwrap();
    let rec = resumed.run_epoch(&ds).unwrap();
    let want = &straight.log()[2];
    assert_eq!(rec.epoch, want.epoch);
    for (task, v) in &want.losses {
        assert!(
            (rec.losses[task] - v).abs() < 1e-6,
            "{task}: {} vs {v}",
            rec.losses[task]
        );
    }
    assert!((rec.total - want.total).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let ds = data(8, 6);
    let (mut m, strategy) = model(Variant::Mtl, 6);
    train(&mut m, &ds, &TrainConfig::new(1, strategy)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Trainer::<f32>::new(&m, TrainConfig::new(1, ScalarizationStrategy::geometric_mean()))
        .unwrap()
        .checkpoint()
        .unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    assert!(dir.path().join("index.json").exists());
    let back = load_checkpoint(dir.path(), None).unwrap();
    assert_eq!(back.model, m);
    let opts = EvalOptions::default();
    let a = evaluate(&m, &ds, Split::Val, &opts).unwrap();
    let b = evaluate(&back.model, &ds, Split::Val, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, evaluate(&m, &ds, Split::Val, &opts).unwrap());
}

#[test]
fn loading_into_wider_encoder_names_base_width() {
    let (m, _) = model(Variant::StlSeg, 0);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Trainer::<f32>::new(&m, TrainConfig::new(1, ScalarizationStrategy::geometric_mean()))
        .unwrap()
        .checkpoint()
        .unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let wider = setup(Variant::StlSeg, &scene(), 8).architecture;
    match load_checkpoint(dir.path(), Some(&wider)) {
        Err(Error::Fingerprint { fields }) => assert_eq!(fields, vec!["encoder.base_width".to_string()]),
        other => panic!("expected fingerprint error, got {other:?}"),
    }
}

#[test]
fn zero_model_scores_background_prevalence() {
    let ds = data(4, 12);
    let s = setup(Variant::StlSeg, &scene(), 4);
    let m = Model::zeroed(s.architecture).unwrap();
    let report = evaluate(&m, &ds, Split::Val, &EvalOptions::default()).unwrap();
    let val = ds.split(Split::Val);
    let classes = ds.spec().seg_classes.len();
    let mut hist = vec![0usize; classes];
    for smp in &val {
        for &c in &smp.seg {
            hist[c as usize] += 1;
        }
    }
    let total: usize = hist.iter().sum();
    let background = hist[0] as f64 / total as f64;
    assert_eq!(report.per_class_iou["background"], background);
    let present = hist.iter().filter(|&&n| n > 0).count();
    assert_eq!(report.mean_iou, Some(background / present as f64));
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let ds = data(0, 8);
    let val = ds.split(Split::Val);
    let seg: Vec<u8> = val.iter().flat_map(|s| s.seg.clone()).collect();
    assert_eq!(class_iou_report(&seg, &seg, 5, None).unwrap().mean, 1.0);
    let boxes: Vec<_> = val.iter().map(|s| s.boxes.clone()).collect();
    assert_eq!(detection_ap(&boxes, &boxes, 0.5).unwrap().mean, 1.0);
}

#[test]
fn non_finite_weights_abort_with_coordinates() {
    let ds = data(16, 0);
    let (mut m, strategy) = model(Variant::StlSeg, 0);
    m.params_mut().get_mut("encoder.stem.weight").unwrap().data_mut()[0] = f32::NAN;
    match train(&mut m, &ds, &TrainConfig::new(1, strategy)) {
        Err(Error::Diverged { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn check64_training_runs() {
    let ds = data(8, 2);
    let (mut m, strategy) = model(Variant::AuxNetTwb, 0);
    let mut cfg = TrainConfig::new(1, strategy);
    cfg.precision = Precision::Check64;
    let log = train(&mut m, &ds, &cfg).unwrap();
    assert!(log[0].total.is_finite());
    assert_eq!(log[0].clamp_events, 0);
}

#[test]
fn unlabeled_batches_are_skipped() {
    let drop: BTreeMap<Task, f64> = [(Task::Segmentation, 0.5)].into_iter().collect();
    let ds = generate(&scene(), 8, 0, &drop).unwrap();
    let (mut m, strategy) = model(Variant::StlSeg, 0);
    let mut cfg = TrainConfig::new(1, strategy);
    cfg.batch_size = 1;
    let log = train(&mut m, &ds, &cfg).unwrap();
    assert_eq!(log[0].batches, 4);
    assert_eq!(log[0].skipped_batches, 4);

    let all: BTreeMap<Task, f64> = [(Task::Segmentation, 1.0)].into_iter().collect();
    let empty = generate(&scene(), 8, 0, &all).unwrap();
    match train(
        &mut m,
        &empty,
        &TrainConfig::new(1, ScalarizationStrategy::geometric_mean()),
    ) {
        Err(Error::InvalidSpec { detail, .. }) => assert!(detail.contains("segmentation"), "{detail}"),
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn incompatible_dataset_is_rejected() {
    let ds = data(4, 0);
    let spec = setup(Variant::StlSeg, &SceneSpec::default(), 4).architecture;
    let m = Model::new(spec, 0).unwrap();
    let err = train(
        &mut m.clone(),
        &ds,
        &TrainConfig::new(1, ScalarizationStrategy::unit_sum(&["segmentation"])),
    );
    assert!(err.is_err());
}
