use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reviewkd::data::{synthetic_dataset, SyntheticConfig};
use reviewkd::nets::{arch, StageNet};
use reviewkd::train::{evaluate, inference_trace, train_distill, train_plain, Checkpoint, Teacher, TrainOptions};
use reviewkd::types::{DistillConfig, Mechanism, TrainSchedule};
use reviewkd::Error;
use reviewkd_tensor::{ParamStore, Tensor};

fn schedule(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: 32,
        decay_start_epoch: epochs,
        ..TrainSchedule::desk()
    }
}

fn data() -> (reviewkd::data::Dataset, reviewkd::data::Dataset) {
    SyntheticConfig::easy(4, 24, 16, 3).generate().unwrap()
}

fn teacher() -> (StageNet, ParamStore) {
    let mut store = ParamStore::new();
    let net = StageNet::new(arch("tiny-wrn-16-2", 4).unwrap(), &mut store, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    (net, store)
}

fn residual(seed: u64, lambda: f64) -> DistillConfig {
    DistillConfig {
        lambda_weight: lambda,
        pyramid_levels: vec![2, 1],
        seed,
        ..DistillConfig::default()
    }
}

#[test]
fn zero_lambda_reproduces_plain_training() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let (tnet, tstore) = teacher();
    let t = Teacher { net: &tnet, store: &tstore };
    let opts = TrainOptions::default();
    let plain = train_plain(&spec, &schedule(2), &train, &test, 5, &opts).unwrap();
    let zero = train_distill(&spec, Some(t), &residual(5, 0.0), &schedule(2), &train, &test, &opts).unwrap();
    let ce = |r: &reviewkd::types::RunRecord| r.per_epoch.iter().map(|e| e.train_ce_loss).collect::<Vec<_>>();
    assert_eq!(ce(&plain.record), ce(&zero.record));
    assert_eq!(plain.record.final_accuracy, zero.record.final_accuracy);
}

#[test]
fn identical_seeds_give_identical_records() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let (tnet, tstore) = teacher();
    let t = Teacher { net: &tnet, store: &tstore };
    let opts = TrainOptions::default();
    let a = train_distill(&spec, Some(t), &residual(1, 1.0), &schedule(2), &train, &test, &opts).unwrap();
    let b = train_distill(&spec, Some(t), &residual(1, 1.0), &schedule(2), &train, &test, &opts).unwrap();
    assert_eq!(a.record.per_epoch, b.record.per_epoch);
    assert_eq!(a.record.config_hash, b.record.config_hash);
    assert_eq!(a.store.fingerprint(), b.store.fingerprint());
    let c = train_distill(&spec, Some(t), &residual(2, 1.0), &schedule(2), &train, &test, &opts).unwrap();
    assert_ne!(a.record.per_epoch, c.record.per_epoch);
}

#[test]
fn teacher_is_frozen_and_student_inference_is_unchanged() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let (tnet, tstore) = teacher();
    let before = tstore.fingerprint();
    let opts = TrainOptions::default();
    let t = Teacher { net: &tnet, store: &tstore };
    for mechanism in [Mechanism::MkdReviewResidual, Mechanism::MkdReviewNaive, Mechanism::LogitKd] {
        let config = DistillConfig {
            mechanism,
            ..residual(0, 1.0)
        };
        let d = train_distill(&spec, Some(t), &config, &schedule(1), &train, &test, &opts).unwrap();
        assert_eq!(tstore.fingerprint(), before);
        assert!(d.record.per_epoch[0].distill_loss > 0.0);
        let plain = train_plain(&spec, &schedule(1), &train, &test, 0, &opts).unwrap();
        let x = Tensor::zeros(&[2, 3, 16, 16]);
        assert_eq!(
            inference_trace(&d.net, &d.store, &x).unwrap(),
            inference_trace(&plain.net, &plain.store, &x).unwrap()
        );
    }
}

#[test]
fn zero_epochs_report_initial_accuracy() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let out = train_plain(&spec, &schedule(0), &train, &test, 3, &TrainOptions::default()).unwrap();
    assert!(out.record.per_epoch.is_empty());
    let initial = evaluate(&out.net, &out.store, &test, 64).unwrap();
    assert_eq!(out.record.final_accuracy, initial);
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.json");
    let opts = TrainOptions {
        checkpoint: Some(path.clone()),
        ..TrainOptions::default()
    };
    let out = train_plain(&spec, &schedule(3), &train, &test, 0, &opts).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.accuracy, out.record.best_accuracy);
    assert_eq!(loaded.config_hash, out.record.config_hash);
    let (net, store) = loaded.restore().unwrap();
    assert_eq!(evaluate(&net, &store, &test, 50).unwrap(), out.record.best_accuracy);
    let (net, store) = out.best.restore().unwrap();
    assert_eq!(evaluate(&net, &store, &test, 17).unwrap(), out.record.best_accuracy);
    assert_eq!(evaluate(&out.net, &out.store, &test, 33).unwrap(), out.record.final_accuracy);
}

#[test]
fn constant_prediction_scores_one_over_k() {
    let (_, test) = data();
    let mut store = ParamStore::new();
    let net = StageNet::new(arch("tiny-resnet-8", 4).unwrap(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut touched = 0;
    for id in ids {
        let name = store.entry(id).name.clone();
        let shape = store.value(id).shape().to_vec();
        if name.ends_with("fc.weight") {
            store.set(id, Tensor::zeros(&shape)).unwrap();
            touched += 1;
        } else if name.ends_with("fc.bias") {
            store.set(id, Tensor::from_fn(&shape, |i| if i == 2 { 1.0 } else { 0.0 })).unwrap();
            touched += 1;
        }
    }
    assert_eq!(touched, 2);
    assert_eq!(evaluate(&net, &store, &test, 7).unwrap(), 25.0);
}

#[test]
fn evaluate_rejects_empty_data() {
    let (_, test) = data();
    let empty = test.subset(&[]).unwrap();
    let mut store = ParamStore::new();
    let net = StageNet::new(arch("tiny-resnet-8", 4).unwrap(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(evaluate(&net, &store, &empty, 8), Err(Error::Data(_))));
}

#[test]
fn easy_synthetic_data_trains_quickly() {
    let train = synthetic_dataset(4, 64, 16, 0).unwrap();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let sched = TrainSchedule {
        epochs: 5,
        batch_size: 32,
        decay_start_epoch: 4,
        ..TrainSchedule::desk()
    };
    let out = train_plain(&spec, &sched, &train, &train, 0, &TrainOptions::default()).unwrap();
    let acc = evaluate(&out.net, &out.store, &train, 128).unwrap();
    assert!(acc >= 90.0, "train accuracy {acc}");
}

#[test]
fn small_split_is_memorized() {
    let (train, _) = data();
    let small = train.subset(&(0..8).collect::<Vec<_>>()).unwrap();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let sched = TrainSchedule {
        epochs: 40,
        batch_size: 8,
        decay_start_epoch: 30,
        weight_decay: 0.0,
        ..TrainSchedule::desk()
    };
    let out = train_plain(&spec, &sched, &small, &small, 0, &TrainOptions::default()).unwrap();
    assert_eq!(evaluate(&out.net, &out.store, &small, 8).unwrap(), 100.0);
}

#[test]
fn non_finite_loss_aborts() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let (tnet, tstore) = teacher();
    let t = Teacher { net: &tnet, store: &tstore };
    let err = train_distill(&spec, Some(t), &residual(0, f64::MAX), &schedule(1), &train, &test, &TrainOptions::default())
        .err()
        .unwrap();
    assert!(matches!(err, Error::Divergence { epoch: 0, .. }), "{err}");
}

#[test]
fn distillation_needs_a_teacher() {
    let (train, test) = data();
    let spec = arch("tiny-resnet-8", 4).unwrap();
    let err = train_distill(&spec, None, &residual(0, 1.0), &schedule(1), &train, &test, &TrainOptions::default())
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)));
}
