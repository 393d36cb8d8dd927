use epispread::diagnostics::{
    average_rootograms, average_sorted_residuals, cdf_interval, ks_normal, predicted_vs_observed, qq_points,
    rootogram, rq_residuals,
};
use epispread::pooling::{rubin_pool, NamedEstimate};
use epispread::simulator::sample_nb;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_estimate(rng: &mut ChaCha8Rng, names: &[&str]) -> NamedEstimate {
    let p = names.len();
    let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
    NamedEstimate {
        names: names.iter().map(|s| s.to_string()).collect(),
        estimate: DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0)),
        covariance: &m * m.transpose() + DMatrix::identity(p, p) * 0.1,
    }
}

proptest! {
    #[test]
    fn pooling_matches_displayed_formulas(seed in 0u64..10_000, k in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fits: Vec<NamedEstimate> = (0..k).map(|_| random_estimate(&mut rng, &["a", "b", "c"])).collect();
        let pooled = rubin_pool(&fits).unwrap();
        let kf = k as f64;
        for j in 0..3 {
            let mean = fits.iter().map(|f| f.estimate[j]).sum::<f64>() / kf;
            let w = fits.iter().map(|f| f.covariance[(j, j)]).sum::<f64>() / kf;
            let b = fits.iter().map(|f| (f.estimate[j] - mean).powi(2)).sum::<f64>() / (kf - 1.0);
            prop_assert!((pooled.estimate[j] - mean).abs() < 1e-12);
            prop_assert!((pooled.within[j][j] - w).abs() < 1e-12);
            prop_assert!((pooled.between[j][j] - b).abs() < 1e-12);
            prop_assert!((pooled.total[j][j] - (w + (1.0 + 1.0 / kf) * b)).abs() < 1e-12);
            let row = &pooled.rows[j];
            let r = (1.0 + 1.0 / kf) * b / w;
            prop_assert!((row.df - (kf - 1.0) * (1.0 + 1.0 / r).powi(2)).abs() < 1e-8 * row.df);
            prop_assert!(row.lower < row.estimate && row.estimate < row.upper);
        }
        let t = pooled.total_matrix();
        prop_assert!((&t - t.transpose()).amax() < 1e-12);
    }

    #[test]
    fn pooling_ignores_imputation_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fits: Vec<NamedEstimate> = (0..5).map(|_| random_estimate(&mut rng, &["a", "b"])).collect();
        let a = rubin_pool(&fits).unwrap();
        fits.reverse();
        fits.swap(0, 2);
        let b = rubin_pool(&fits).unwrap();
        for j in 0..2 {
            prop_assert!((a.estimate[j] - b.estimate[j]).abs() < 1e-12);
            prop_assert!((a.total[j][j] - b.total[j][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_uniform_lies_in_cdf_interval(seed in 0u64..1000, mu in 0.05f64..50.0, phi in 0.2f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..50).map(|_| sample_nb(&mut rng, mu, phi) as f64).collect();
        let mus = vec![mu; y.len()];
        let r = rq_residuals(&y, &mus, phi, seed, 0).unwrap();
        let phi_cdf = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / 2f64.sqrt()));
        for (yi, ri) in y.iter().zip(&r.residuals) {
            let (lo, hi) = cdf_interval(*yi, mu, phi);
            let u = phi_cdf(*ri);
            prop_assert!(u >= lo - 1e-9 && u <= hi + 1e-9);
        }
    }
}

#[test]
fn identical_fits_have_no_between_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_estimate(&mut rng, &["x", "y"]);
    let pooled = rubin_pool(&[f.clone(), f.clone(), f.clone()]).unwrap();
    for j in 0..2 {
        assert_eq!(pooled.between[j][j], 0.0);
        assert!((pooled.total[j][j] - f.covariance[(j, j)]).abs() < 1e-12);
        assert!(pooled.rows[j].df.is_infinite());
    }
}

#[test]
fn names_are_matched_not_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_estimate(&mut rng, &["x", "y"]);
    let mut b = a.clone();
    b.names.reverse();
    b.estimate = DVector::from_vec(vec![a.estimate[1], a.estimate[0]]);
    b.covariance = DMatrix::from_fn(2, 2, |i, j| a.covariance[(1 - i, 1 - j)]);
    let pooled = rubin_pool(&[a, b]).unwrap();
    assert!(pooled.between.iter().flatten().all(|v| v.abs() < 1e-15));
}

#[test]
fn residuals_are_reproducible_and_draws_differ() {
    let y = vec![0.0, 1.0, 4.0, 2.0, 0.0];
    let mu = vec![1.0, 1.5, 3.0, 2.0, 0.5];
    let a = rq_residuals(&y, &mu, 3.0, 7, 0).unwrap();
    let b = rq_residuals(&y, &mu, 3.0, 7, 0).unwrap();
    let c = rq_residuals(&y, &mu, 3.0, 7, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.residuals, c.residuals);
}

#[test]
fn residuals_of_model_data_pass_ks_and_shifted_fail() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu: Vec<f64> = (0..5000).map(|_| rng.random_range(0.2..20.0)).collect();
    let y: Vec<f64> = mu.iter().map(|&m| sample_nb(&mut rng, m, 8.0) as f64).collect();
    let r = rq_residuals(&y, &mu, 8.0, 1, 0).unwrap();
    assert!(ks_normal(&r.residuals).unwrap().p_value > 0.01);
    let wrong: Vec<f64> = mu.iter().map(|m| m * 1.5).collect();
    let r = rq_residuals(&y, &wrong, 8.0, 1, 0).unwrap();
    assert!(ks_normal(&r.residuals).unwrap().p_value < 1e-6);
}

#[test]
fn rootogram_frequencies_add_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mu: Vec<f64> = (0..400).map(|_| rng.random_range(0.5..15.0)).collect();
    let y: Vec<f64> = mu.iter().map(|&m| sample_nb(&mut rng, m, 2.0) as f64).collect();
    let r = rootogram(&y, &mu, 2.0, 10).unwrap();
    let observed: f64 = r.bins.iter().map(|b| b.observed).sum::<f64>() + r.observed_beyond;
    assert_eq!(observed, 400.0);
    let expected: f64 = r.bins.iter().map(|b| b.expected).sum();
    assert!(expected <= 400.0);
    let tail: f64 = mu
        .iter()
        .map(|&m| 1.0 - epispread::engine::nb_cdf(10.0, m, 2.0))
        .sum();
    assert!((400.0 - expected - tail).abs() < 1e-8);
}

#[test]
fn rootogram_stays_within_resimulation_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu: Vec<f64> = (0..2000).map(|_| rng.random_range(0.5..10.0)).collect();
    let gap = |y: &[f64]| {
        let r = rootogram(y, &mu, 4.0, 20).unwrap();
        r.bins.iter().map(|b| (b.sqrt_observed - b.sqrt_expected).abs()).sum::<f64>() / r.bins.len() as f64
    };
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { mu.iter().map(|&m| sample_nb(rng, m, 4.0) as f64).collect() };
    let data = draw(&mut rng);
    let noise = (0..50).map(|_| gap(&draw(&mut rng))).sum::<f64>() / 50.0;
    assert!(gap(&data) <= 2.0 * noise);
}

#[test]
fn perfect_prediction_and_zero_counts() {
    let y = vec![0.0, 3.0, 10.0, 1.0];
    let p = predicted_vs_observed(&y, &y).unwrap();
    assert!((p.correlation - 1.0).abs() < 1e-12);
    assert_eq!(p.log_observed[0], 0.0);
}

#[test]
fn strong_signal_predictions_correlate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mu: Vec<f64> = (0..1000).map(|_| (rng.random_range(-1.0..4.0f64)).exp()).collect();
    let y: Vec<f64> = mu.iter().map(|&m| sample_nb(&mut rng, m, 20.0) as f64).collect();
    assert!(predicted_vs_observed(&y, &mu).unwrap().correlation > 0.8);
}

#[test]
fn averaging_is_elementwise() {
    let y = vec![0.0, 1.0, 2.0, 5.0];
    let a = rootogram(&y, &[1.0, 1.0, 2.0, 4.0], 3.0, 6).unwrap();
    let b = rootogram(&y, &[0.5, 2.0, 2.0, 3.0], 3.0, 6).unwrap();
    let avg = average_rootograms(&[a.clone(), b.clone()]).unwrap();
    for v in 0..7 {
        assert!((avg.bins[v].expected - 0.5 * (a.bins[v].expected + b.bins[v].expected)).abs() < 1e-15);
        assert!((avg.bins[v].sqrt_expected - 0.5 * (a.bins[v].sqrt_expected + b.bins[v].sqrt_expected)).abs() < 1e-15);
    }
    let r1 = rq_residuals(&y, &[1.0; 4], 3.0, 1, 0).unwrap();
    let r2 = rq_residuals(&y, &[1.0; 4], 3.0, 1, 1).unwrap();
    let mean = average_sorted_residuals(&[r1.clone(), r2.clone()]).unwrap();
    let mut s1 = r1.residuals.clone();
    let mut s2 = r2.residuals.clone();
    s1.sort_by(f64::total_cmp);
    s2.sort_by(f64::total_cmp);
    for i in 0..4 {
        assert!((mean[i] - 0.5 * (s1[i] + s2[i])).abs() < 1e-15);
    }
    assert_eq!(qq_points(&r1.residuals).len(), 4);
}
