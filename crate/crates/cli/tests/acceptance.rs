//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use epispread::basis::{pspline_block, SmoothSpec};
use epispread::diagnostics::{ks_normal, rq_residuals};
use epispread::embedding::{classical_mds, procrustes_align, DistanceMatrix};
use epispread::engine::{
    edf_per_term, fit_model, nb_loglik, nb_logpmf, optimize_smoothing, penalized_loglik, penalized_score, pirls,
    reml_criterion, Family, FitOptions, FitResult, NegBin, OuterFamily, PenalizedProblem, PenaltyTerm, PirlsOptions,
    QuasiPoisson, SmoothingOptions,
};
use epispread::features::{gini_index, CoLocationMatrix};
use epispread::imputation::{build_imputations, fit_delay_model, DelayModelOptions};
use epispread::linalg::Design;
use epispread::panel::{assemble_model_frame, FrameSpec, FrameTerms};
use epispread::pooling::{pool_fits, rubin_pool, CPooling, NamedEstimate};
use epispread::simulator::{apply_missingness, simulate, simulate_line_list, SimulationConfig};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn brute_gini(row: &[f64], i: usize) -> f64 {
    let n = row.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for m in 0..n {
        if m == i {
            continue;
        }
        den += row[m];
        for l in 0..n {
            if l != i {
                num += (row[m] - row[l]).abs();
            }
        }
    }
    num / (2.0 * (n as f64 - 1.0) * den)
}

fn gini_of(row: &[f64], i: usize) -> f64 {
    let n = row.len();
    let mut p = DMatrix::from_element(n, n, 1.0);
    for (j, v) in row.iter().enumerate() {
        p[(i, j)] = *v;
    }
    gini_index(&CoLocationMatrix::new(1, p).unwrap(), i).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let n = rng.random_range(3..=12);
        let i = rng.random_range(0..n);
        let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        // sparse rows exercise ties at zero
        if rng.random::<f64>() < 0.2 {
            for v in row.iter_mut() {
                if rng.random::<f64>() < 0.5 {
                    *v = 0.0;
                }
            }
            row[(i + 1) % n] = 0.5;
        }
        worst = worst.max((gini_of(&row, i) - brute_gini(&row, i)).abs());
    }
    let mut bounds = true;
    for n in 3..=12 {
        let flat = vec![0.3; n];
        let mut spike = vec![0.0; n];
        spike[(n - 1) % n] = 2.0;
        bounds &= gini_of(&flat, 0).abs() < 1e-12;
        bounds &= (gini_of(&spike, 0) - (n as f64 - 2.0) / (n as f64 - 1.0)).abs() < 1e-12;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-12 && bounds && secs < 5.0,
        format!("max |gini − oracle| = {worst:.1e} over 1000 rows, bounds attained: {bounds}, {secs:.2} s"),
    )
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts: Vec<[f64; 2]> = (0..20).map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0]).collect();
    let d = DMatrix::from_fn(20, 20, |i, j| dist(pts[i], pts[j]));
    let emb = classical_mds(&DistanceMatrix::new(d.clone()).unwrap(), 2).unwrap();
    let rec = emb.points();
    let mut worst = 0.0_f64;
    for i in 0..20 {
        for j in 0..20 {
            worst = worst.max((dist(rec[i], rec[j]) - d[(i, j)]).abs());
        }
    }
    // target = 2 · R90 · x + (3, 4)
    let target: Vec<[f64; 2]> = pts.iter().map(|p| [3.0 - 2.0 * p[1], 4.0 + 2.0 * p[0]]).collect();
    let (t, _) = procrustes_align(&pts, &target).unwrap();
    let r = t.rotation.transpose();
    let rot_err = (r[(0, 0)]).abs() + (r[(0, 1)] + 1.0).abs() + (r[(1, 0)] - 1.0).abs() + r[(1, 1)].abs();
    let ok = (t.dilation - 2.0).abs() < 1e-10
        && rot_err < 1e-10
        && (t.translation[0] - 3.0).abs() < 1e-9
        && (t.translation[1] - 4.0).abs() < 1e-9
        && t.residual < 1e-18;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-8 && ok && secs < 1.0,
        format!(
            "distance recovery {worst:.1e}; ρ = {:.12}, b = ({:.9}, {:.9}), R² = {:.1e}; {secs:.3} s",
            t.dilation, t.translation[0], t.translation[1], t.residual
        ),
    )
}

/// Random NB problem from a small simulated panel, with a random point near
/// the optimum and random smoothing parameters.
fn random_frame(seed: u64) -> (PenalizedProblem, NegBin, Vec<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SimulationConfig {
        seed,
        districts: rng.random_range(6..=10),
        weeks: rng.random_range(4..=6),
        ..SimulationConfig::default()
    };
    let data = simulate(&cfg).unwrap();
    let spec = FrameSpec {
        coord: SmoothSpec::thinplate(5),
        social: SmoothSpec::thinplate(5),
        terms: FrameTerms::default(),
    };
    let frame = assemble_model_frame(&data.panel, &data.truth.features, Some(&data.truth.social), &data.registry, &data.population, &spec).unwrap();
    let problem = frame.problem_at(rng.random_range(0.1..1.0)).unwrap();
    let lik = NegBin::Scalar(rng.random_range(1.0..50.0));
    let lambda: Vec<f64> = problem.terms.iter().map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
    let fit = pirls(&problem, &lik, &lambda, None, PirlsOptions::default()).unwrap();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let theta = fit.theta.map(|v| v + noise.sample(&mut rng));
    (problem, lik, lambda, theta)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..20 {
        let (problem, lik, lambda, theta) = random_frame(300 + seed);
        let g = penalized_score(&problem, &lik, &lambda, &theta);
        let mut fd = DVector::zeros(theta.len());
        for j in 0..theta.len() {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            fd[j] = (penalized_loglik(&problem, &lik, &lambda, &up) - penalized_loglik(&problem, &lik, &lambda, &dn)) / (2.0 * h);
        }
        worst = worst.max((&fd - &g).amax() / g.amax());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 30.0, format!("max relative error {worst:.1e} over 20 frames, {secs:.1} s"))
}

fn criterion_4() -> Outcome {
    let mut total = 0.0;
    let mut comp = 0.0;
    for y in 0..=1_000_000u32 {
        // Kahan summation
        let v = nb_logpmf(y as f64, 5.0, 2.0).exp() - comp;
        let t = total + v;
        comp = (t - total) - v;
        total = t;
    }
    let norm = (total - 1.0).abs();
    // the exact gap grows like y²/(2φ), so the 1e-4 bound only holds for y, μ ≲ 140
    let gap = |y: u32, mu: f64| {
        let lf: f64 = (1..=y).map(|j| (j as f64).ln()).sum();
        (nb_logpmf(y as f64, mu, 1e8) - (y as f64 * mu.ln() - mu - lf)).abs()
    };
    let mut poisson = 0.0_f64;
    for &mu in &[0.1, 1.0, 3.5, 20.0, 100.0] {
        for y in 0..=100u32 {
            poisson = poisson.max(gap(y, mu));
        }
    }
    let far = gap(300, 0.1);
    let half = nb_loglik(&[0.0], &[1.0], 1.0).unwrap();
    let exact = half == 0.5f64.ln();
    outcome(
        norm < 1e-12 && poisson < 1e-4 && exact,
        format!("|Σpmf − 1| = {norm:.1e}, Poisson limit gap {poisson:.1e} for y, μ ≤ 100 ({far:.1e} at y = 300), nb_loglik(0;1,1) == ln ½: {exact}"),
    )
}

fn poisson_smooth_problem(y: Vec<f64>, x: &[f64], k: usize) -> PenalizedProblem {
    let block = pspline_block(x, &SmoothSpec::pspline(k), "s(x)").unwrap();
    let n = x.len();
    let p = block.ncols() + 1;
    let dense = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { block.design[(i, j - 1)] });
    let mut names = vec!["(intercept)".to_string()];
    names.extend((1..p).map(|j| format!("s(x).{j}")));
    let term = PenaltyTerm::new("s(x)", 1, block.penalty.clone()).unwrap();
    PenalizedProblem::new(Design::from_dense(&dense), y, vec![0.0; n], names, vec![term]).unwrap()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let lik = QuasiPoisson { phi: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| Poisson::new((1.0 + (2.0 * std::f64::consts::PI * v).sin()).exp()).unwrap().sample(&mut rng))
        .collect();
    let problem = poisson_smooth_problem(y, &x, 20);
    let opt = optimize_smoothing(&problem, OuterFamily::Fixed(&lik), &SmoothingOptions::default()).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for g in 0..41 {
        let log10 = -6.0 + 0.3 * g as f64;
        let lambda = [10f64.powf(log10)];
        let fit = pirls(&problem, &lik, &lambda, None, PirlsOptions::default()).unwrap();
        let v = reml_criterion(&problem, &lambda, &fit).unwrap();
        if v > best.0 {
            best = (v, log10);
        }
    }
    let found = opt.lambda[0].log10();
    let grid_ok = (found - best.1).abs() <= 0.3 + 1e-12;

    let mut small = 0;
    for rep in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
        let x: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..200).map(|_| Poisson::new(3.0).unwrap().sample(&mut rng)).collect();
        let problem = poisson_smooth_problem(y, &x, 10);
        let opt = optimize_smoothing(&problem, OuterFamily::Fixed(&lik), &SmoothingOptions::default()).unwrap();
        let (_, per, _) = edf_per_term(&problem, &opt.fit);
        // constrained order-2 P-spline: linear null space only
        if per[0] <= 1.0 + 0.5 {
            small += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        grid_ok && small >= 45 && secs < 300.0,
        format!(
            "log10 τ̂ = {found:.3} vs grid {:.1}; noise edf ≤ 1.5 in {small}/50; {secs:.1} s",
            best.1
        ),
    )
}

fn full_spec(gini: bool) -> FrameSpec {
    FrameSpec {
        terms: FrameTerms { gini, ..FrameTerms::default() },
        ..FrameSpec::default()
    }
}

fn fit_panel(seed: u64, gini: bool) -> FitResult {
    let cfg = SimulationConfig { seed, ..SimulationConfig::default() };
    let data = simulate(&cfg).unwrap();
    let frame = assemble_model_frame(&data.panel, &data.truth.features, Some(&data.truth.social), &data.registry, &data.population, &full_spec(gini)).unwrap();
    fit_model(&|c: f64| frame.problem_at(c), Family::NegativeBinomial, &FitOptions::default()).unwrap()
}

fn criterion_6(full: &[FitResult], secs: f64) -> Outcome {
    let inside = full.iter().filter(|f| f.c_hat > 0.35 && f.c_hat < 0.65).count();
    let mean = full.iter().map(|f| f.c_hat).sum::<f64>() / full.len() as f64;
    let ses: Vec<f64> = full.iter().filter_map(|f| f.c_se).collect();
    let se = ses.iter().sum::<f64>() / ses.len().max(1) as f64;
    outcome(
        inside as f64 >= 0.9 * full.len() as f64 && secs < 1200.0,
        format!(
            "ĉ ∈ (0.35, 0.65) in {inside}/{} panels, mean ĉ {mean:.3} (mean SE {se:.3}; reference 0.499, SE 0.027); {secs:.0} s",
            full.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (mut covered, mut total) = (0usize, 0usize);
    for rep in 0..100u64 {
        let seed = 700 + rep;
        let cfg = SimulationConfig {
            seed,
            districts: 20,
            weeks: 8,
            ..SimulationConfig::default()
        };
        let data = simulate(&cfg).unwrap();
        let complete = simulate_line_list(&data, &cfg).unwrap();
        let cases = apply_missingness(&complete, 0.3, 0.5, seed).unwrap();
        let model = fit_delay_model(&cases, &DelayModelOptions::default()).unwrap();
        let imputations = build_imputations(&cases, &model, 5, seed, &data.registry, data.calendar, &data.population).unwrap();
        let spec = FrameSpec {
            coord: SmoothSpec::thinplate(10),
            social: SmoothSpec::thinplate(10),
            terms: FrameTerms::default(),
        };
        let fits: Vec<FitResult> = imputations
            .iter()
            .map(|imp| {
                let frame = assemble_model_frame(&imp.panel, &data.truth.features, Some(&data.truth.social), &data.registry, &data.population, &spec).unwrap();
                fit_model(&|c: f64| frame.problem_at(c), Family::NegativeBinomial, &FitOptions::default()).unwrap()
            })
            .collect();
        let pooled = pool_fits(&fits, CPooling::Pooled).unwrap();
        for (name, truth) in &data.truth.coefficients {
            let row = pooled.row(name).unwrap();
            total += 1;
            if row.lower <= *truth && *truth <= row.upper {
                covered += 1;
            }
        }
    }
    let rate = covered as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        (rate - 0.95).abs() <= 0.07 && secs < 7200.0,
        format!("coverage {covered}/{total} = {rate:.3} over 100 replicates (n=20, T=8, K=5); {secs:.0} s"),
    )
}

fn criterion_8() -> Outcome {
    let scalar = |v: f64| NamedEstimate {
        names: vec!["x".into()],
        estimate: DVector::from_element(1, v),
        covariance: DMatrix::from_element(1, 1, 1.0),
    };
    let p = rubin_pool(&[scalar(0.0), scalar(2.0)]).unwrap();
    outcome(
        p.estimate[0] == 1.0 && p.total[0][0] == 4.0 && p.between[0][0] == 2.0,
        format!("pooled {}, between {}, total {}", p.estimate[0], p.between[0][0], p.total[0][0]),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut passed = 0;
    let mut pmin = 1.0_f64;
    for seed in 0..50u64 {
        let cfg = SimulationConfig {
            seed: 900 + seed,
            districts: 84,
            weeks: 16,
            ..SimulationConfig::default()
        };
        let data = simulate(&cfg).unwrap();
        let mut y = Vec::new();
        let mut mu = Vec::new();
        for (k, (_, _, t, count)) in data.panel.cells().enumerate() {
            if t >= 2 {
                y.push(count as f64);
                mu.push((data.truth.nu_end[k] + data.truth.nu_epi[k]).exp());
            }
        }
        y.truncate(5000);
        mu.truncate(5000);
        let r = rq_residuals(&y, &mu, cfg.phi, seed, 0).unwrap();
        let ks = ks_normal(&r.residuals).unwrap();
        pmin = pmin.min(ks.p_value);
        if ks.p_value > 0.01 {
            passed += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        passed >= 48 && secs < 120.0,
        format!("KS p > 0.01 in {passed}/50 seeds (N = 5000, min p {pmin:.3}); {secs:.1} s"),
    )
}

fn criterion_10(full: &[FitResult], reduced: &[FitResult]) -> Outcome {
    let wins = full.iter().zip(reduced).filter(|(f, r)| f.caic < r.caic).count();
    let mut deltas: Vec<f64> = full.iter().zip(reduced).map(|(f, r)| r.caic - f.caic).collect();
    deltas.sort_by(f64::total_cmp);
    outcome(
        wins as f64 >= 0.9 * full.len() as f64,
        format!(
            "full model has lower cAIC in {wins}/{} replicates, median ΔcAIC {:.1} (reference direction: 280.3)",
            full.len(),
            deltas[deltas.len() / 2]
        ),
    )
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_epispread"))
        .args(args)
        .env_remove("EPISPREAD_OUT")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let sim = base.join("sim.toml");
    std::fs::write(
        &sim,
        "[imputation]\nk = 3\nseed = 11\n\n[model]\ncoord_k = 6\nsocial_k = 6\n\n[simulate.model]\ndistricts = 12\nweeks = 6\nseed = 11\n",
    )
    .unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (d1, d2) = (base.join("data1"), base.join("data2"));
    let (r1, r2) = (base.join("run1"), base.join("run2"));
    let mut ok = cli(&["simulate", "--config", &s(&sim), "--out", &s(&d1)])
        && cli(&["simulate", "--config", &s(&sim), "--out", &s(&d2)]);
    let cfg = s(&d1.join("config.toml"));
    ok = ok
        && cli(&["pipeline", "--config", &cfg, "--out", &s(&r1)])
        && cli(&["pipeline", "--config", &cfg, "--out", &s(&r2)]);
    if !ok {
        return outcome(false, "CLI run failed".into());
    }
    let (t1, t2) = (tree(&d1), tree(&d2));
    let (u1, u2) = (tree(&r1), tree(&r2));
    let files = t1.len() + u1.len();
    let same = t1 == t2 && u1 == u2;
    outcome(same && files > 20, format!("{files} artifacts compared across two runs, identical: {same}"))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "gini oracle", criterion_1());
    record(2, "mds/procrustes recovery", criterion_2());
    record(3, "gradient check", criterion_3());
    record(4, "negative binomial", criterion_4());
    record(5, "smoothing selection", criterion_5());

    let start = Instant::now();
    let full6: Vec<FitResult> = (1..=25).map(|s| fit_panel(s, true)).collect();
    let secs6 = start.elapsed().as_secs_f64();
    record(6, "profile c recovery", criterion_6(&full6, secs6));

    record(7, "coverage", criterion_7());
    record(8, "rubin hand check", criterion_8());
    record(9, "residual calibration", criterion_9());

    let mut full = full6;
    full.extend((26..=50).map(|s| fit_panel(s, true)));
    let reduced: Vec<FitResult> = (1..=50).map(|s| fit_panel(s, false)).collect();
    record(10, "cAIC ranking", criterion_10(&full, &reduced));

    record(11, "determinism", criterion_11());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
