use std::cell::RefCell;

use nalgebra::DVector;

use super::reml::{edf_per_term, reml_criterion};
use super::{
    nelder_mead_max, pirls, Gaussian, Likelihood, NegBin, NelderMeadOptions, PenalizedProblem, PirlsFit,
    PirlsOptions, QuasiPoisson,
};
use crate::error::{Error, Result};

/// How the dispersion is handled by the outer loop.
#[derive(Clone, Copy)]
pub enum OuterFamily<'a> {
    /// Negative binomial; `log φ` is an outer parameter.
    NegativeBinomial,
    /// Gaussian identity; `log scale` is an outer parameter.
    Gaussian,
    /// Quasi-Poisson with Pearson-estimated φ.
    Quasi,
    /// Fully specified likelihood, only smoothing parameters are optimized.
    Fixed(&'a dyn Likelihood),
}

impl OuterFamily<'_> {
    fn has_scale(&self) -> bool {
        matches!(self, OuterFamily::NegativeBinomial | OuterFamily::Gaussian)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SmoothingOptions {
    /// Number of simplex starts (the first from `initial` or a heuristic).
    pub starts: usize,
    pub simplex: NelderMeadOptions,
    pub pirls: PirlsOptions,
    pub log_lambda_bounds: (f64, f64),
    pub log_scale_bounds: (f64, f64),
    /// Warm start on the outer scale: `log λ` per term, then `log φ` if any.
    pub initial: Option<Vec<f64>>,
    /// Offset between successive starts in `log λ`.
    pub start_spread: f64,
}

impl Default for SmoothingOptions {
    fn default() -> Self {
        SmoothingOptions {
            starts: 3,
            simplex: NelderMeadOptions::default(),
            pirls: PirlsOptions::default(),
            log_lambda_bounds: (-20.0, 25.0),
            log_scale_bounds: (-12.0, 16.0),
            initial: None,
            start_spread: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothingResult {
    pub lambda: Vec<f64>,
    /// Dispersion (NB size, Gaussian variance or quasi φ); `None` for fixed likelihoods.
    pub phi: Option<f64>,
    pub reml: f64,
    pub fit: PirlsFit,
    /// Outer parameters at the optimum (clamped).
    pub rho: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn boxed_lik<'a>(family: OuterFamily<'a>, scale: f64) -> Box<dyn Likelihood + 'a> {
    match family {
        OuterFamily::NegativeBinomial => Box::new(NegBin::Scalar(scale)),
        OuterFamily::Gaussian => Box::new(Gaussian { scale }),
        OuterFamily::Quasi => Box::new(QuasiPoisson { phi: scale }),
        OuterFamily::Fixed(l) => Box::new(Wrapped(l)),
    }
}

struct Wrapped<'a>(&'a dyn Likelihood);

impl Likelihood for Wrapped<'_> {
    fn eval(&self, i: usize, y: f64, eta: f64) -> super::ObsTerms {
        self.0.eval(i, y, eta)
    }
    fn initial_eta(&self, i: usize, y: f64) -> f64 {
        self.0.initial_eta(i, y)
    }
    fn mean(&self, eta: f64) -> f64 {
        self.0.mean(eta)
    }
}

/// Heuristic starting point: each `λⱼ` balances the trace of its penalty
/// against the trace of the matching information block of a pilot fit.
fn heuristic_start(problem: &PenalizedProblem, family: OuterFamily<'_>, opts: &SmoothingOptions) -> Result<Vec<f64>> {
    let pilot_lik: Box<dyn Likelihood> = match family {
        OuterFamily::NegativeBinomial | OuterFamily::Quasi => Box::new(QuasiPoisson { phi: 1.0 }),
        OuterFamily::Gaussian => Box::new(Gaussian { scale: 1.0 }),
        OuterFamily::Fixed(l) => Box::new(Wrapped(l)),
    };
    let ones = vec![1.0; problem.terms.len()];
    let pilot = pirls(problem, pilot_lik.as_ref(), &ones, None, opts.pirls)?;
    let mut rho: Vec<f64> = problem
        .terms
        .iter()
        .map(|t| {
            let g: f64 = t.range().map(|k| pilot.gram[(k, k)]).sum();
            let s = t.s.trace();
            (g / s).max(1e-8).ln().clamp(opts.log_lambda_bounds.0, opts.log_lambda_bounds.1)
        })
        .collect();
    let mu: Vec<f64> = pilot.eta.iter().map(|&e| pilot_lik.mean(e)).collect();
    match family {
        OuterFamily::NegativeBinomial => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (y, m) in problem.y.iter().zip(&mu) {
                num += m * m;
                den += (y - m).powi(2) - m;
            }
            let phi = if den > 0.0 { num / den } else { 1e4 };
            rho.push(phi.clamp(1e-2, 1e6).ln());
        }
        OuterFamily::Gaussian => {
            let rss: f64 = problem.y.iter().zip(&mu).map(|(y, m)| (y - m).powi(2)).sum();
            rho.push((rss / problem.nobs() as f64).max(1e-12).ln());
        }
        _ => {}
    }
    Ok(rho)
}

struct Outer<'a> {
    problem: &'a PenalizedProblem,
    family: OuterFamily<'a>,
    opts: &'a SmoothingOptions,
    warm: RefCell<Option<DVector<f64>>>,
}

impl Outer<'_> {
    fn clamp(&self, rho: &[f64]) -> Vec<f64> {
        let m = self.problem.terms.len();
        rho.iter()
            .enumerate()
            .map(|(j, &r)| {
                let (lo, hi) = if j < m {
                    self.opts.log_lambda_bounds
                } else {
                    self.opts.log_scale_bounds
                };
                r.clamp(lo, hi)
            })
            .collect()
    }

    fn split(&self, rho: &[f64], fixed_scale: f64) -> (Vec<f64>, f64) {
        let m = self.problem.terms.len();
        let lambda = rho[..m].iter().map(|r| r.exp()).collect();
        let scale = if self.family.has_scale() { rho[m].exp() } else { fixed_scale };
        (lambda, scale)
    }

    fn evaluate(&self, rho: &[f64], fixed_scale: f64, warm: bool) -> Result<(f64, PirlsFit)> {
        let rho = self.clamp(rho);
        let (lambda, scale) = self.split(&rho, fixed_scale);
        let lik = boxed_lik(self.family, scale);
        let start = if warm { self.warm.borrow().clone() } else { None };
        let fit = match pirls(self.problem, lik.as_ref(), &lambda, start.as_ref(), self.opts.pirls) {
            Ok(f) => f,
            Err(_) if start.is_some() => pirls(self.problem, lik.as_ref(), &lambda, None, self.opts.pirls)?,
            Err(e) => return Err(e),
        };
        let v = reml_criterion(self.problem, &lambda, &fit)?;
        if warm {
            *self.warm.borrow_mut() = Some(fit.theta.clone());
        }
        Ok((v, fit))
    }

    fn search(&self, starts: &[Vec<f64>], fixed_scale: f64) -> Result<(Vec<f64>, usize, bool, Vec<f64>)> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut evaluations = 0;
        let mut any_converged = false;
        let mut trace = Vec::new();
        for s in starts {
            let r = nelder_mead_max(
                |rho| match self.evaluate(rho, fixed_scale, true) {
                    Ok((v, _)) => v,
                    Err(_) => f64::NEG_INFINITY,
                },
                s,
                self.opts.simplex,
            );
            evaluations += r.evaluations;
            any_converged |= r.converged;
            trace.extend(&r.trace);
            if best.as_ref().is_none_or(|(v, _)| r.value > *v) {
                best = Some((r.value, self.clamp(&r.x)));
            }
        }
        let (value, rho) = best.ok_or_else(|| Error::Optimizer("no starting point supplied".into()))?;
        if !value.is_finite() {
            return Err(Error::Optimizer(format!(
                "criterion is not finite at any visited point (trace length {})",
                trace.len()
            )));
        }
        Ok((rho, evaluations, any_converged, trace))
    }
}

fn pearson_phi(problem: &PenalizedProblem, fit: &PirlsFit) -> f64 {
    let (edf, _, _) = edf_per_term(problem, fit);
    let x2: f64 = problem
        .y
        .iter()
        .zip(&fit.eta)
        .map(|(y, e)| {
            let m = e.exp();
            (y - m).powi(2) / m
        })
        .sum();
    let dof = (problem.nobs() as f64 - edf).max(1.0);
    (x2 / dof).max(1e-8)
}

/// Maximizes the REML criterion over log smoothing parameters (and log
/// dispersion where the family has one) by multi-start simplex search.
pub fn optimize_smoothing(
    problem: &PenalizedProblem,
    family: OuterFamily<'_>,
    opts: &SmoothingOptions,
) -> Result<SmoothingResult> {
    let outer = Outer {
        problem,
        family,
        opts,
        warm: RefCell::new(None),
    };
    let dims = problem.terms.len() + usize::from(family.has_scale());
    let base = match &opts.initial {
        Some(r) if r.len() == dims => r.clone(),
        Some(_) => return Err(Error::invalid("warm start has the wrong length")),
        None => heuristic_start(problem, family, opts)?,
    };
    let m = problem.terms.len();
    let starts: Vec<Vec<f64>> = (0..opts.starts.max(1))
        .map(|k| {
            let shift = match k {
                0 => 0.0,
                k if k % 2 == 1 => opts.start_spread * k.div_ceil(2) as f64,
                k => -opts.start_spread * (k / 2) as f64,
            };
            base.iter().enumerate().map(|(j, &r)| if j < m { r + shift } else { r }).collect()
        })
        .collect();

    let mut phi_fixed = 1.0;
    let (rho, evaluations, converged, trace) = if let OuterFamily::Quasi = family {
        let (rho1, e1, _, mut t1) = outer.search(&starts, 1.0)?;
        let (_, pilot) = outer.evaluate(&rho1, 1.0, false)?;
        phi_fixed = pearson_phi(problem, &pilot);
        let (rho2, e2, c2, t2) = outer.search(&[rho1], phi_fixed)?;
        let (_, refit) = outer.evaluate(&rho2, phi_fixed, false)?;
        phi_fixed = pearson_phi(problem, &refit);
        t1.extend(t2);
        (rho2, e1 + e2, c2, t1)
    } else {
        outer.search(&starts, 1.0)?
    };
    if !converged {
        return Err(Error::Optimizer(format!(
            "simplex search did not converge in {} evaluations; last values {:?}",
            evaluations,
            &trace[trace.len().saturating_sub(5)..]
        )));
    }
    // final inner fit from a cold start so the result does not depend on the search path
    let (reml, fit) = outer
        .evaluate(&rho, phi_fixed, false)
        .or_else(|_| outer.evaluate(&rho, phi_fixed, true))?;
    let (lambda, scale) = outer.split(&rho, phi_fixed);
    let phi = match family {
        OuterFamily::Fixed(_) => None,
        _ => Some(scale),
    };
    Ok(SmoothingResult {
        lambda,
        phi,
        reml,
        fit,
        rho,
        evaluations,
        converged,
        trace,
    })
}
