use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::reml::edf_per_term;
use super::smoothing::{optimize_smoothing, OuterFamily, SmoothingOptions, SmoothingResult};
use super::{golden_section_max, Family, NelderMeadOptions, PenalizedProblem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub smoothing: SmoothingOptions,
    /// Search interval for the offset constant.
    pub c_bounds: (f64, f64),
    pub c_tol: f64,
    /// Skip the profile search and use this value.
    pub fixed_c: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            smoothing: SmoothingOptions::default(),
            c_bounds: (1e-6, 1.0),
            c_tol: 1e-3,
            fixed_c: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEdf {
    pub term: String,
    pub edf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingRow {
    pub term: String,
    pub lambda: f64,
    /// `1/√λ`: the implied random-effect standard deviation for ridge terms.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileC {
    pub c_hat: f64,
    /// `None` when the profile is flat at the optimum.
    pub se: Option<f64>,
    /// Every `(c, profile value)` evaluated, in evaluation order.
    pub points: Vec<(f64, f64)>,
    pub curvature: f64,
    #[serde(skip)]
    pub warm_start: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub coefficients: Vec<CoefficientRow>,
    /// Names of the unpenalized coefficients, in the order of `fixed_covariance`.
    pub fixed_names: Vec<String>,
    pub fixed_covariance: Vec<Vec<f64>>,
    pub smoothing: Vec<SmoothingRow>,
    pub phi: f64,
    pub c_hat: f64,
    pub c_se: Option<f64>,
    pub profile: Vec<(f64, f64)>,
    pub edf: Vec<TermEdf>,
    pub edf_total: f64,
    pub loglik: f64,
    pub reml: f64,
    pub caic: f64,
    pub converged: bool,
    pub nobs: usize,
    /// Fitted means `μ̂` per observation.
    #[serde(skip)]
    pub fitted: Vec<f64>,
    /// Full `H⁻¹`.
    #[serde(skip)]
    pub covariance: Option<DMatrix<f64>>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientRow> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// `−2 ℓ + 2 (edf + 1)`; the extra degree of freedom accounts for `φ̂`.
pub fn caic(fit: &FitResult) -> f64 {
    -2.0 * fit.loglik + 2.0 * (fit.edf_total + 1.0)
}

fn outer_family(family: Family) -> OuterFamily<'static> {
    match family {
        Family::NegativeBinomial => OuterFamily::NegativeBinomial,
        Family::Quasi => OuterFamily::Quasi,
        Family::Gaussian => OuterFamily::Gaussian,
    }
}

/// Golden-section search of the REML-profiled criterion over `c`; each
/// evaluation re-optimizes smoothing parameters and dispersion, warm-started
/// from the previous evaluation.
pub fn profile_c<B>(builder: &B, family: Family, opts: &FitOptions) -> Result<ProfileC>
where
    B: Fn(f64) -> Result<PenalizedProblem> + ?Sized,
{
    let (lo, hi) = opts.c_bounds;
    if !(lo > 0.0 && hi <= 1.0 && lo < hi) {
        return Err(Error::invalid("offset constant bounds must satisfy 0 < lo < hi <= 1"));
    }
    let mid = 0.5 * (lo + hi);
    let pilot = optimize_smoothing(&builder(mid)?, outer_family(family), &SmoothingOptions {
        starts: 1,
        ..opts.smoothing.clone()
    })?;
    let warm = std::cell::RefCell::new(pilot.rho.clone());
    let inner = SmoothingOptions {
        starts: 1,
        simplex: NelderMeadOptions {
            step: 0.5,
            ..opts.smoothing.simplex
        },
        ..opts.smoothing.clone()
    };
    let eval = |c: f64| -> f64 {
        let run = || -> Result<SmoothingResult> {
            let problem = builder(c)?;
            optimize_smoothing(&problem, outer_family(family), &SmoothingOptions {
                initial: Some(warm.borrow().clone()),
                ..inner.clone()
            })
        };
        match run() {
            Ok(r) => {
                *warm.borrow_mut() = r.rho.clone();
                r.reml
            }
            Err(e) => {
                log::warn!("profile evaluation at c = {c} failed: {e}");
                f64::NEG_INFINITY
            }
        }
    };
    let (c_hat, f_hat, mut points) = golden_section_max(eval, lo, hi, opts.c_tol);
    if !f_hat.is_finite() {
        return Err(Error::Optimizer("profile criterion not finite anywhere on the search interval".into()));
    }
    let warm_start = Some(warm.borrow().clone());

    let h = (0.02_f64).min(0.5 * (c_hat - lo)).max(1e-4);
    let (a, b) = if c_hat + h <= hi { (c_hat - h, c_hat + h) } else { (c_hat - 2.0 * h, c_hat - h) };
    let fa = eval(a);
    let fb = eval(b);
    points.push((a, fa));
    points.push((b, fb));
    let second = if c_hat + h <= hi {
        (fa - 2.0 * f_hat + fb) / (h * h)
    } else {
        (f_hat - 2.0 * fb + fa) / (h * h)
    };
    let curvature = -second;
    let se = if curvature.is_finite() && curvature > 1e-8 {
        Some(1.0 / curvature.sqrt())
    } else {
        log::warn!("profile for c is flat at {c_hat:.4}; standard error reported as infinite");
        None
    };
    Ok(ProfileC {
        c_hat,
        se,
        points,
        curvature,
        warm_start,
    })
}

/// Builds the result tables from a converged smoothing optimum.
pub fn summarize(problem: &PenalizedProblem, family: Family, sm: &SmoothingResult, profile: &ProfileC) -> FitResult {
    let fit = &sm.fit;
    let cov: DMatrix<f64> = fit.chol.inverse();
    let p = problem.ncols();
    let coefficients = (0..p)
        .map(|k| CoefficientRow {
            name: problem.names[k].clone(),
            estimate: fit.theta[k],
            se: cov[(k, k)].max(0.0).sqrt(),
        })
        .collect();
    let mut penalized = vec![false; p];
    for t in &problem.terms {
        for k in t.range() {
            penalized[k] = true;
        }
    }
    let fixed: Vec<usize> = (0..p).filter(|&k| !penalized[k]).collect();
    let fixed_covariance = fixed
        .iter()
        .map(|&a| fixed.iter().map(|&b| cov[(a, b)]).collect())
        .collect();
    let (edf_total, per, rest) = edf_per_term(problem, fit);
    let mut edf = vec![TermEdf {
        term: "parametric".into(),
        edf: rest,
    }];
    edf.extend(problem.terms.iter().zip(per).map(|(t, e)| TermEdf {
        term: t.label.clone(),
        edf: e,
    }));
    let smoothing = problem
        .terms
        .iter()
        .zip(&sm.lambda)
        .map(|(t, &l)| SmoothingRow {
            term: t.label.clone(),
            lambda: l,
            sd: 1.0 / l.sqrt(),
        })
        .collect();
    let fitted = match family {
        Family::Gaussian => fit.eta.clone(),
        _ => fit.eta.iter().map(|e| e.exp()).collect(),
    };
    let mut out = FitResult {
        family,
        coefficients,
        fixed_names: fixed.iter().map(|&k| problem.names[k].clone()).collect(),
        fixed_covariance,
        smoothing,
        phi: sm.phi.unwrap_or(1.0),
        c_hat: profile.c_hat,
        c_se: profile.se,
        profile: profile.points.clone(),
        edf,
        edf_total,
        loglik: fit.loglik,
        reml: sm.reml,
        caic: 0.0,
        converged: sm.converged,
        nobs: problem.nobs(),
        fitted,
        covariance: Some(cov),
    };
    out.caic = caic(&out);
    out
}

/// Two-stage fit: profile search for `ĉ`, then a multi-start smoothing
/// optimization at `ĉ` with the reported covariance `H⁻¹`.
pub fn fit_model<B>(builder: &B, family: Family, opts: &FitOptions) -> Result<FitResult>
where
    B: Fn(f64) -> Result<PenalizedProblem> + ?Sized,
{
    let profile = match opts.fixed_c {
        Some(c) => {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::invalid("offset constant must lie in (0, 1]"));
            }
            ProfileC {
                c_hat: c,
                se: None,
                points: vec![],
                curvature: f64::NAN,
                warm_start: None,
            }
        }
        None => profile_c(builder, family, opts)?,
    };
    let problem = builder(profile.c_hat)?;
    let sm = optimize_smoothing(&problem, outer_family(family), &SmoothingOptions {
        initial: profile.warm_start.clone().or(opts.smoothing.initial.clone()),
        ..opts.smoothing.clone()
    })?;
    Ok(summarize(&problem, family, &sm, &profile))
}
