use rand::Rng;
use rand_distr::StandardNormal;
use voxreg::dataio::{Dataset, Sample};
use voxreg::trainer::{mse, predict_dataset, split_two, train_member, StopReason, TrainConfig};
use voxreg::volgrad::Tensor;
use voxreg::voxcnn::{encode_checkpoint, VoxCnnConfig, VoxCnnModel};

const EXTENT: usize = 8;

fn tiny() -> VoxCnnConfig {
    VoxCnnConfig {
        input_extent: [EXTENT; 3],
        base_filters: 2,
        fc_hidden: 8,
        n_blocks: 2,
        aux_tap_block: 1,
        dropout_conv: 0.0,
        dropout_fc: 0.0,
        ..VoxCnnConfig::default()
    }
}

fn dataset(n: usize, seed: u64, target: impl Fn(usize) -> f64) -> Dataset {
    let mut r = voxreg::rng::stream(seed);
    let samples = (0..n)
        .map(|i| Sample {
            subject_id: format!("s{i}"),
            volume: Tensor::from_fn(&[2, EXTENT, EXTENT, EXTENT], |_| r.sample::<f32, _>(StandardNormal)),
            tabular: vec![],
            target: Some(target(i)),
        })
        .collect();
    Dataset::new(samples).unwrap()
}

fn fresh(seed: u64) -> VoxCnnModel<f64> {
    VoxCnnModel::new(tiny(), &mut voxreg::rng::stream(seed)).unwrap()
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let train = dataset(6, 1, |i| i as f64);
    let val = dataset(3, 2, |i| i as f64);
    let model = fresh(3);
    let config = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let (best, report) = train_member(model.clone(), &train, &val, &config).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.best_val_mse, None);
    assert_eq!(report.stop_reason, StopReason::NoEpochs);
    assert_eq!(best.model, model);
}

#[test]
fn worsening_validation_stops_after_patience_and_keeps_the_best_snapshot() {
    // Training pulls predictions up while the validation targets sit far
    // below, so every epoch after the first scores worse.
    let train = dataset(8, 4, |_| 20.0);
    let val = dataset(8, 4, |_| -20.0);
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        max_epochs: 40,
        patience: 3,
        seed: 6,
        ..TrainConfig::default()
    };
    let (best, report) = train_member(fresh(7), &train, &val, &config).unwrap();
    let vals: Vec<f64> = report.epochs.iter().map(|e| e.val_mse).collect();
    assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
    assert_eq!(report.stop_reason, StopReason::Patience);
    assert_eq!(report.epochs.len(), 1 + config.patience);
    assert_eq!(report.best_epoch, 1);
    assert_eq!(best.meta.epoch, 1);
    assert_eq!(report.best_val_mse, Some(vals[0]));
    let again = mse(&predict_dataset(&best.model, &val).unwrap(), &val.targets().unwrap());
    assert_eq!(again, vals[0]);
}

#[test]
fn patience_stop_always_returns_the_epoch_patience_earlier() {
    let train = dataset(10, 8, |i| (i as f64 * 0.9).sin());
    let val = dataset(5, 9, |i| (i as f64 * 1.7).cos());
    for seed in 0..3 {
        let config = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 5,
            max_epochs: 25,
            patience: 2,
            seed,
            ..TrainConfig::default()
        };
        let (best, report) = train_member(fresh(seed), &train, &val, &config).unwrap();
        let best_mse = report.best_val_mse.unwrap();
        assert!(report.epochs.iter().all(|e| e.val_mse >= best_mse));
        assert_eq!(report.epochs[report.best_epoch - 1].val_mse, best_mse);
        if report.stop_reason == StopReason::Patience {
            assert_eq!(report.epochs.len(), report.best_epoch + config.patience);
        }
        assert_eq!(best.meta.val_mse, Some(best_mse));
    }
}

#[test]
fn identical_seeds_train_identically() {
    let train = dataset(8, 10, |i| i as f64 / 4.0);
    let val = dataset(4, 11, |i| i as f64 / 4.0);
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 3,
        max_epochs: 4,
        seed: 12,
        ..TrainConfig::default()
    };
    let model = VoxCnnModel::<f64>::new(
        VoxCnnConfig {
            dropout_conv: 0.2,
            dropout_fc: 0.5,
            ..tiny()
        },
        &mut voxreg::rng::stream(1),
    )
    .unwrap();
    let (a, ra) = train_member(model.clone(), &train, &val, &config).unwrap();
    let (b, rb) = train_member(model, &train, &val, &config).unwrap();
    assert_eq!(ra.to_json(), rb.to_json());
    assert_eq!(
        encode_checkpoint(&a.model, a.optimizer.as_ref(), &a.meta),
        encode_checkpoint(&b.model, b.optimizer.as_ref(), &b.meta)
    );
}

#[test]
fn small_model_memorizes_a_handful_of_subjects() {
    let mut r = voxreg::rng::stream(13);
    let targets: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
    let train = dataset(6, 14, |i| targets[i]);
    let config = TrainConfig {
        learning_rate: 3e-4,
        batch_size: 6,
        max_epochs: 300,
        patience: 300,
        seed: 15,
        ..TrainConfig::default()
    };
    let wider = VoxCnnConfig {
        base_filters: 4,
        fc_hidden: 32,
        ..tiny()
    };
    let model = VoxCnnModel::<f64>::new(wider, &mut voxreg::rng::stream(16)).unwrap();
    let initial = mse(&predict_dataset(&model, &train).unwrap(), &targets);
    let (best, report) = train_member(model, &train, &train, &config).unwrap();
    let fitted = mse(&predict_dataset(&best.model, &train).unwrap(), &targets);
    assert!(
        fitted < initial / 100.0,
        "initial {initial}, fitted {fitted}, {}",
        report.log_lines()
    );
}

#[test]
fn split_two_is_a_disjoint_cover() {
    let (a, b) = split_two(3739, 21, 0.5).unwrap();
    assert_eq!((a.len(), b.len()), (1870, 1869));
    let mut all = [a.clone(), b].concat();
    all.sort_unstable();
    assert_eq!(all, (0..3739).collect::<Vec<_>>());
    assert_eq!(split_two(3739, 21, 0.5).unwrap().0, a);
    assert_ne!(split_two(3739, 22, 0.5).unwrap().0, a);
}
