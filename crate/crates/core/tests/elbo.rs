mod common;

use common::*;
use proptest::prelude::*;
use survae_core::diffcore::Tensor;
use survae_core::model::{draw_noise, elbo, elbo_with_noise, Activation, Batch, ElboOptions};
use survae_core::rng::seeded;

#[test]
fn elbo_never_exceeds_exact_evidence() {
    check_lower_bound().unwrap();
}

#[test]
fn exact_posterior_family_closes_the_gap_in_two_dimensions_of_x() {
    let mut rng = seeded(4);
    let mut lg = LinearGaussian::new(&mut rng, 2, 1, 2, 3);
    let log_px = lg.log_evidence();
    randomize_encoder(&mut lg.params, &mut rng, 0.3);
    let (before, _) = elbo_estimate(&lg, 4000, &mut rng);
    fit_encoder(&mut lg, 3000, &mut rng);
    let (after, se) = elbo_estimate(&lg, 20_000, &mut rng);
    assert!(after > before);
    assert!(log_px - after < 0.05, "gap {} (se {se})", log_px - after);
    assert!(after <= log_px + 3.0 * se);
}

#[test]
fn censoring_changes_only_the_survival_term() {
    check_censoring().unwrap();
}

fn row(batch: &Batch, r: usize) -> Batch {
    batch.subset(&[r])
}

fn noise_rows(noise: &Tensor, rows: std::ops::Range<usize>) -> Tensor {
    let n = rows.len();
    let data = rows.flat_map(|r| noise.row(r).to_vec()).collect();
    Tensor::matrix(n, noise.cols(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_elbo_is_the_mean_of_singletons(seed in any::<u64>(), n in 1usize..6, s in 1usize..4) {
        let mut rng = seeded(seed);
        let kinds = random_kinds(&mut rng, 2, 1);
        let params = random_params(&mut rng, kinds, 2, 2, 3, Activation::Tanh);
        let batch = random_batch(&mut rng, &params, n);
        let noise = draw_noise(n, s, 2, &mut rng);
        let opts = ElboOptions::with_samples(s);
        let whole = elbo_with_noise(&params, &batch, &noise, &opts).unwrap().total;
        let parts: f64 = (0..n)
            .map(|r| elbo_with_noise(&params, &row(&batch, r), &noise_rows(&noise, r * s..(r + 1) * s), &opts).unwrap().total)
            .sum();
        prop_assert!((whole - parts / n as f64).abs() <= 1e-10 * whole.abs().max(1.0));
    }
}

#[test]
fn single_and_many_sample_estimates_agree() {
    let mut rng = seeded(21);
    let kinds = random_kinds(&mut rng, 3, 1);
    let params = random_params(&mut rng, kinds, 2, 2, 4, Activation::Tanh);
    let batch = random_batch(&mut rng, &params, 10);
    let reference = elbo(&params, &batch, &ElboOptions::with_samples(64), &mut rng).unwrap();
    let singles: Vec<f64> = (0..200)
        .map(|_| elbo(&params, &batch, &ElboOptions::with_samples(1), &mut rng).unwrap().total)
        .collect();
    let mean = singles.iter().sum::<f64>() / 200.0;
    let sd = (singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    let se = sd / 200f64.sqrt();
    let tol = 3.0 * (se.powi(2) + reference.std_error.unwrap().powi(2)).sqrt();
    assert!((mean - reference.total).abs() < tol, "{mean} vs {} (tol {tol})", reference.total);
}
