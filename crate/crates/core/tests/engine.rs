use epispread::basis::{difference_penalty, pspline_block, SmoothSpec};
use epispread::engine::{
    edf_per_term, fit_model, nb_logpmf, optimize_smoothing, penalized_score, pirls, reml_criterion, Family,
    FitOptions, Gaussian, NegBin, OuterFamily, PenalizedProblem, PenaltyTerm, PirlsOptions, QuasiPoisson,
    SmoothingOptions,
};
use epispread::linalg::Design;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("b{j}")).collect()
}

/// Intercept, one linear covariate and a ridge-penalized block of `q` random columns.
fn random_problem(rng: &mut ChaCha8Rng, n: usize, q: usize, counts: bool) -> (PenalizedProblem, DMatrix<f64>) {
    let p = 2 + q;
    let x = DMatrix::<f64>::from_fn(n, p, |_, j| match j {
        0 => 1.0,
        _ => rng.random_range(-1.0..1.0),
    });
    let truth = DVector::from_fn(p, |j, _| if j == 0 { 1.0 } else { rng.random_range(-0.5..0.5) });
    let eta = &x * &truth;
    let y: Vec<f64> = eta
        .iter()
        .map(|e: &f64| {
            if counts {
                Poisson::new(e.exp()).unwrap().sample(rng)
            } else {
                e + Normal::new(0.0, 0.5).unwrap().sample(rng)
            }
        })
        .collect();
    let term = PenaltyTerm::new("r", 2, DMatrix::identity(q, q)).unwrap();
    let problem = PenalizedProblem::new(Design::from_dense(&x), y, vec![0.0; n], names(p), vec![term]).unwrap();
    (problem, x)
}

/// Fisher-scoring iterations for the penalized NB fit, written from scratch.
fn iwls_oracle(x: &DMatrix<f64>, y: &[f64], phi: f64, s: &DMatrix<f64>) -> DVector<f64> {
    let p = x.ncols();
    let mut theta = DVector::zeros(p);
    theta[0] = (y.iter().sum::<f64>() / y.len() as f64 + 0.1).ln();
    for _ in 0..500 {
        let eta = x * &theta;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..x.nrows() {
            let mu = eta[i].exp();
            let w = mu * phi / (mu + phi);
            let z = eta[i] + (y[i] - mu) / mu;
            let row = x.row(i).transpose();
            xtwx += &row * row.transpose() * w;
            xtwz += row * (w * z);
        }
        let next = (xtwx + s).lu().solve(&xtwz).unwrap();
        let done = (&next - &theta).amax() < 1e-13;
        theta = next;
        if done {
            break;
        }
    }
    theta
}

#[test]
fn pirls_matches_independent_iwls() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let (problem, x) = random_problem(&mut rng, 30, 4, true);
        let lambda = [rng.random_range(0.1..5.0)];
        let lik = NegBin::Scalar(3.0);
        let fit = pirls(&problem, &lik, &lambda, None, PirlsOptions::default()).unwrap();
        let oracle = iwls_oracle(&x, &problem.y, 3.0, &problem.penalty_matrix(&lambda));
        assert!((&fit.theta - &oracle).amax() < 1e-7, "{} vs {}", fit.theta, oracle);
        let g = penalized_score(&problem, &lik, &lambda, &fit.theta);
        assert!(g.amax() < 1e-8 * (1.0 + fit.penalized.abs()));
    }
}

#[test]
fn pirls_trace_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let (problem, _) = random_problem(&mut rng, 60, 5, true);
        let fit = pirls(&problem, &NegBin::Scalar(1.5), &[0.5], None, PirlsOptions::default()).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10 * w[0].abs());
        }
    }
}

#[test]
fn intercept_only_fit_is_sample_mean() {
    let y = vec![0.0, 3.0, 1.0, 7.0, 2.0, 0.0, 4.0];
    let n = y.len();
    let x = DMatrix::from_element(n, 1, 1.0);
    let problem = PenalizedProblem::new(Design::from_dense(&x), y.clone(), vec![0.0; n], names(1), vec![]).unwrap();
    let fit = pirls(&problem, &NegBin::Scalar(2.0), &[], None, PirlsOptions::default()).unwrap();
    let mean = y.iter().sum::<f64>() / n as f64;
    assert!((fit.theta[0].exp() - mean).abs() < 1e-10);
}

#[test]
fn huge_ridge_penalty_shrinks_block_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (problem, _) = random_problem(&mut rng, 50, 5, true);
    let fit = pirls(&problem, &NegBin::Scalar(5.0), &[1e12], None, PirlsOptions::default()).unwrap();
    for j in 2..7 {
        assert!(fit.theta[j].abs() < 1e-5);
    }
}

#[test]
fn quasi_poisson_with_unit_scale_is_poisson() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (problem, _) = random_problem(&mut rng, 40, 3, true);
    let fit = pirls(&problem, &QuasiPoisson { phi: 1.0 }, &[1.0], None, PirlsOptions::default()).unwrap();
    let lf = |y: f64| (1..=y as u64).map(|j| (j as f64).ln()).sum::<f64>();
    let poisson: f64 = problem
        .y
        .iter()
        .zip(&fit.eta)
        .map(|(&y, &e)| y * e - e.exp() - lf(y))
        .sum();
    let constant: f64 = problem.y.iter().map(|&y| lf(y)).sum();
    assert!((fit.loglik - (poisson + constant)).abs() < 1e-9 * poisson.abs());
    // the huge-size NB fit lands on the same coefficients
    let nb = pirls(&problem, &NegBin::Scalar(1e9), &[1.0], None, PirlsOptions::default()).unwrap();
    assert!((&nb.theta - &fit.theta).amax() < 1e-6);
}

/// Restricted log-likelihood of `y ~ N(X₀β₀, σ²I + Z (λS)⁻¹ Zᵀ)` with a flat prior on `β₀`.
fn gaussian_reml_oracle(x0: &DMatrix<f64>, z: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64, sigma2: f64, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let p0 = x0.ncols() as f64;
    let prior = (s * lambda).try_inverse().unwrap();
    let v = DMatrix::identity(y.len(), y.len()) * sigma2 + z * prior * z.transpose();
    let vchol = v.clone().cholesky().unwrap();
    let vinv = vchol.inverse();
    let a = x0.transpose() * &vinv * x0;
    let beta = a.clone().lu().solve(&(x0.transpose() * &vinv * y)).unwrap();
    let r = y - x0 * beta;
    let logdet_v: f64 = 2.0 * vchol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let logdet_a = a.determinant().ln();
    -0.5 * (n - p0) * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet_v - 0.5 * logdet_a - 0.5 * (r.transpose() * vinv * r)[(0, 0)]
}

#[test]
fn gaussian_reml_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..10 {
        let n = 25;
        let q = 4;
        let (problem, x) = random_problem(&mut rng, n, q, false);
        // replace the identity with a random full-rank penalty
        let m = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
        let s = &m * m.transpose() + DMatrix::identity(q, q) * 0.1;
        let term = PenaltyTerm::new("r", 2, s.clone()).unwrap();
        let problem = PenalizedProblem::new(problem.x.clone(), problem.y.clone(), vec![0.0; n], names(2 + q), vec![term]).unwrap();
        let lambda = rng.random_range(0.05..20.0);
        let sigma2 = rng.random_range(0.1..2.0);
        let fit = pirls(&problem, &Gaussian { scale: sigma2 }, &[lambda], None, PirlsOptions::default()).unwrap();
        let ours = reml_criterion(&problem, &[lambda], &fit).unwrap();
        let oracle = gaussian_reml_oracle(&x.columns(0, 2).into_owned(), &x.columns(2, q).into_owned(), &s, lambda, sigma2, &DVector::from_vec(problem.y.clone()));
        assert!((ours - oracle).abs() < 1e-8 * oracle.abs().max(1.0), "{ours} vs {oracle}");
    }
}

fn smooth_problem(x: &[f64], y: Vec<f64>, k: usize) -> PenalizedProblem {
    let block = pspline_block(x, &SmoothSpec::pspline(k), "s").unwrap();
    let n = x.len();
    let p = block.ncols() + 1;
    let dense = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { block.design[(i, j - 1)] });
    let term = PenaltyTerm::new("s", 1, block.penalty.clone()).unwrap();
    PenalizedProblem::new(Design::from_dense(&dense), y, vec![0.0; n], names(p), vec![term]).unwrap()
}

fn two_smooth_problem(rng: &mut ChaCha8Rng) -> PenalizedProblem {
    let n = 150;
    let x1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mu = (1.0 + (6.0 * x1[i]).sin() + 0.5 * x2[i]).exp();
            Poisson::new(mu).unwrap().sample(rng)
        })
        .collect();
    let b1 = pspline_block(&x1, &SmoothSpec::pspline(8), "s1").unwrap();
    let b2 = pspline_block(&x2, &SmoothSpec::pspline(8), "s2").unwrap();
    let q = b1.ncols();
    let p = 1 + 2 * q;
    let dense = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        j if j <= q => b1.design[(i, j - 1)],
        j => b2.design[(i, j - 1 - q)],
    });
    let terms = vec![
        PenaltyTerm::new("s1", 1, b1.penalty.clone()).unwrap(),
        PenaltyTerm::new("s2", 1 + q, b2.penalty.clone()).unwrap(),
    ];
    PenalizedProblem::new(Design::from_dense(&dense), y, vec![0.0; n], names(p), terms).unwrap()
}

#[test]
fn reml_optimum_is_local_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let problem = two_smooth_problem(&mut rng);
    let opt = optimize_smoothing(&problem, OuterFamily::NegativeBinomial, &SmoothingOptions::default()).unwrap();
    let phi = opt.phi.unwrap();
    let lik = NegBin::Scalar(phi);
    let at = |lambda: &[f64]| {
        let fit = pirls(&problem, &lik, lambda, None, PirlsOptions::default()).unwrap();
        reml_criterion(&problem, lambda, &fit).unwrap()
    };
    let best = at(&opt.lambda);
    for k in 0..2 {
        for f in [0.75, 1.25] {
            let mut l = opt.lambda.clone();
            l[k] *= f;
            assert!(at(&l) <= best + 1e-7 * best.abs(), "term {k} factor {f}");
        }
    }
}

#[test]
fn reml_is_invariant_to_column_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let problem = two_smooth_problem(&mut rng);
    let p = problem.ncols();
    let q = (p - 1) / 2;
    // swap the two smooth blocks and move the intercept last
    let perm: Vec<usize> = (1 + q..p).chain(1..1 + q).chain([0]).collect();
    let x = problem.x.permute_columns(&perm).unwrap();
    let terms = vec![
        PenaltyTerm::new("s2", 0, problem.terms[1].s.clone()).unwrap(),
        PenaltyTerm::new("s1", q, problem.terms[0].s.clone()).unwrap(),
    ];
    let permuted = PenalizedProblem::new(x, problem.y.clone(), problem.offset.clone(), names(p), terms).unwrap();
    let lik = NegBin::Scalar(4.0);
    let a = pirls(&problem, &lik, &[2.0, 30.0], None, PirlsOptions::default()).unwrap();
    let b = pirls(&permuted, &lik, &[30.0, 2.0], None, PirlsOptions::default()).unwrap();
    let ra = reml_criterion(&problem, &[2.0, 30.0], &a).unwrap();
    let rb = reml_criterion(&permuted, &[30.0, 2.0], &b).unwrap();
    assert!((ra - rb).abs() < 1e-8 * ra.abs());
    for (k, &j) in perm.iter().enumerate() {
        assert!((a.theta[j] - b.theta[k]).abs() < 1e-8);
    }
}

#[test]
fn grid_search_agrees_with_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let x: Vec<f64> = (0..150).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| Poisson::new((1.0 + (5.0 * v).cos()).exp()).unwrap().sample(&mut rng))
        .collect();
    let problem = smooth_problem(&x, y, 15);
    let lik = QuasiPoisson { phi: 1.0 };
    let opt = optimize_smoothing(&problem, OuterFamily::Fixed(&lik), &SmoothingOptions::default()).unwrap();
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for g in 0..41 {
        let l = -6.0 + 0.3 * g as f64;
        let fit = pirls(&problem, &lik, &[10f64.powf(l)], None, PirlsOptions::default()).unwrap();
        let v = reml_criterion(&problem, &[10f64.powf(l)], &fit).unwrap();
        if v > best {
            best = v;
            arg = l;
        }
    }
    assert!((opt.lambda[0].log10() - arg).abs() <= 0.3 + 1e-9);
    assert!(opt.reml >= best - 1e-8);
}

#[test]
fn unpenalized_model_has_full_edf_and_aic() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let n = 80;
    let x = DMatrix::<f64>::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mu = (1.0 + 0.3 * x[(i, 1)]).exp();
            Poisson::new(mu).unwrap().sample(&mut rng)
        })
        .collect();
    let problem = PenalizedProblem::new(Design::from_dense(&x), y.clone(), vec![0.0; n], names(3), vec![]).unwrap();
    let fit = fit_model(&|_c: f64| Ok(problem.clone()), Family::NegativeBinomial, &FitOptions {
        fixed_c: Some(0.5),
        ..FitOptions::default()
    })
    .unwrap();
    assert!((fit.edf_total - 3.0).abs() < 1e-8);
    let mu: Vec<f64> = fit.fitted.clone();
    let ll: f64 = y.iter().zip(&mu).map(|(&y, &m)| nb_logpmf(y, m, fit.phi)).sum();
    assert!((fit.caic - (-2.0 * ll + 2.0 * 4.0)).abs() < 1e-6);
}

#[test]
fn forced_zero_penalty_gives_column_count_edf() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let (problem, _) = random_problem(&mut rng, 60, 4, true);
    let fit = pirls(&problem, &NegBin::Scalar(2.0), &[1e-12], None, PirlsOptions::default()).unwrap();
    let (total, per, rest) = edf_per_term(&problem, &fit);
    assert!((total - 6.0).abs() < 1e-6);
    assert!((per[0] - 4.0).abs() < 1e-6);
    assert!((rest - 2.0).abs() < 1e-6);
}

#[test]
fn profile_is_flat_without_autoregression() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (problem, _) = random_problem(&mut rng, 50, 3, true);
    let fit = fit_model(&|_c: f64| Ok(problem.clone()), Family::NegativeBinomial, &FitOptions::default()).unwrap();
    let first = fit.profile[0].1;
    assert!(fit.profile.iter().all(|p| (p.1 - first).abs() < 1e-6 * first.abs()));
    assert!(fit.c_se.is_none_or(|s| s.is_infinite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rescaling_a_covariate_rescales_its_coefficient(seed in 0u64..1000, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (problem, x) = random_problem(&mut rng, 40, 3, true);
        let mut scaled = x.clone();
        scaled.column_mut(1).scale_mut(scale);
        let other = PenalizedProblem::new(Design::from_dense(&scaled), problem.y.clone(), problem.offset.clone(), names(5), problem.terms.clone()).unwrap();
        let lik = NegBin::Scalar(4.0);
        let a = pirls(&problem, &lik, &[1.0], None, PirlsOptions::default()).unwrap();
        let b = pirls(&other, &lik, &[1.0], None, PirlsOptions::default()).unwrap();
        prop_assert!((a.theta[1] - b.theta[1] * scale).abs() < 1e-7 * a.theta[1].abs().max(1.0));
        prop_assert!((a.loglik - b.loglik).abs() < 1e-8 * a.loglik.abs());
    }

    #[test]
    fn edf_lies_between_null_space_and_columns(seed in 0u64..1000, log_lambda in -4.0f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| Poisson::new(2.0 + v).unwrap().sample(&mut rng)).collect();
        let problem = smooth_problem(&x, y, 8);
        let fit = pirls(&problem, &NegBin::Scalar(3.0), &[10f64.powf(log_lambda)], None, PirlsOptions::default()).unwrap();
        let (total, per, _) = edf_per_term(&problem, &fit);
        prop_assert!(per[0] >= 1.0 - 1e-6 && per[0] <= 7.0 + 1e-6);
        prop_assert!(total <= problem.ncols() as f64 + 1e-8);
    }
}

#[test]
fn difference_penalty_annihilates_polynomials_of_lower_order() {
    let s = difference_penalty(9, 2);
    let lin = DVector::from_fn(9, |i, _| 2.0 - 0.7 * i as f64);
    assert!((lin.transpose() * &s * &lin)[(0, 0)].abs() < 1e-12);
    let quad = DVector::from_fn(9, |i, _| (i * i) as f64);
    assert!((quad.transpose() * &s * &quad)[(0, 0)] > 1.0);
}
