mod common;

use common::*;
use survae_core::data::{generate, inject_missing, mar_driver, SynthConfig, MAR_SLOPE};
use survae_core::impute::logistic_newton;
use survae_core::pipeline::{fit, FitOptions, ModelArtifact};
use survae_core::rng::seeded;

#[test]
fn pipeline_is_byte_reproducible() {
    check_end_to_end().unwrap();
}

#[test]
fn different_seeds_give_different_models() {
    let a = pipeline_outputs(1).unwrap();
    let b = pipeline_outputs(2).unwrap();
    assert_ne!(a[1].1, b[1].1);
}

#[test]
fn artifact_survives_a_file_round_trip() {
    let (ds, _) = generate(&SynthConfig { n: 90, seed: 3, ..SynthConfig::default() }).unwrap();
    let mut opts = FitOptions::default();
    opts.train.max_epochs = 3;
    opts.train.patience = 1;
    opts.train.mc_samples_eval = 2;
    let artifact = fit(&ds, &opts).unwrap().artifact;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    artifact.save(&path).unwrap();
    let loaded = ModelArtifact::load(&path).unwrap();
    assert_eq!(loaded, artifact);
    assert_eq!(loaded.fingerprint().unwrap(), artifact.fingerprint().unwrap());
}

#[test]
fn missingness_follows_the_driver_with_the_configured_slope() {
    let (ds, _) = generate(&SynthConfig { n: 3000, seed: 10, ..SynthConfig::default() }).unwrap();
    let masked = inject_missing(&ds, 0.2, &mut seeded(10)).unwrap();
    let driver = mar_driver(&ds.schema);
    let col: Vec<f64> = ds.covariates.iter().map(|r| r[driver]).collect();
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
    let mut design = Vec::new();
    let mut missing = Vec::new();
    for (r, row) in masked.observed.iter().enumerate() {
        assert!(row[driver], "driver column must stay observed");
        for (j, &obs) in row.iter().enumerate() {
            if j != driver {
                design.extend([1.0, (col[r] - mean) / sd]);
                missing.push(if obs { 0.0 } else { 1.0 });
            }
        }
    }
    let x = nalgebra::DMatrix::from_row_slice(missing.len(), 2, &design);
    let y = nalgebra::DVector::from_vec(missing.clone());
    let beta = logistic_newton(&x, &y).unwrap();
    assert!((beta[1] - MAR_SLOPE).abs() < 0.1, "slope {}", beta[1]);
    let rate = missing.iter().sum::<f64>() / missing.len() as f64;
    assert!((masked.missing_fraction() - 0.2).abs() < 0.02, "{rate}");
}
