mod common;

use common::*;
use survae_core::training::{train_batches, StopReason, TrainConfig};

#[test]
fn early_stopping_and_stable_trace() {
    check_early_stopping().unwrap();
}

#[test]
fn zero_patience_returns_the_first_epoch() {
    let (train, val, init) = small_training_setup(5, 80);
    let config = TrainConfig {
        max_epochs: 20,
        patience: 0,
        mc_samples_eval: 4,
        ..TrainConfig::default()
    };
    let (params, report) = train_batches(init, &train, &val, &config).unwrap();
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.stopped, StopReason::Patience);
    let (_, again) = train_batches(params.clone(), &train, &val, &TrainConfig { max_epochs: 1, ..config }).unwrap();
    assert_eq!(again.stopped, StopReason::MaxEpochs);
}

#[test]
fn max_epochs_caps_training() {
    let (train, val, init) = small_training_setup(6, 80);
    let config = TrainConfig {
        max_epochs: 7,
        patience: 6,
        learning_rate: 1e-2,
        mc_samples_eval: 4,
        ..TrainConfig::default()
    };
    let (_, report) = train_batches(init, &train, &val, &config).unwrap();
    assert!(report.epochs.len() <= 7);
    let peak = report.epochs.iter().map(|r| r.val_elbo).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best().val_elbo, peak);
    assert!(report.epochs.iter().enumerate().all(|(i, r)| r.epoch == i));
}

#[test]
fn training_improves_the_elbo() {
    let (train, val, init) = small_training_setup(8, 200);
    let config = TrainConfig {
        max_epochs: 60,
        patience: 59,
        mc_samples_eval: 8,
        ..TrainConfig::default()
    };
    let (_, report) = train_batches(init, &train, &val, &config).unwrap();
    let window = |range: std::ops::Range<usize>| {
        let mut v: Vec<f64> = report.epochs[range].iter().map(|r| r.train_elbo).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(window(50..60) > window(0..10));
    let best = report.best();
    assert!((best.train_elbo - best.val_elbo).abs() < 0.1 * best.val_elbo.abs());
}
