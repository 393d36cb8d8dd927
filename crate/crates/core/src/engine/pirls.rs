use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{Likelihood, PenalizedProblem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PirlsOptions {
    pub max_iter: usize,
    /// Converged when `max |∇ℓ_p| < tol · (1 + |ℓ_p|)`.
    pub tol: f64,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        PirlsOptions {
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PirlsFit {
    pub theta: DVector<f64>,
    pub eta: Vec<f64>,
    /// Unpenalized log-likelihood at `theta`.
    pub loglik: f64,
    /// Penalized log-likelihood at `theta`.
    pub penalized: f64,
    pub weights: Vec<f64>,
    /// `Xᵀ W X`.
    pub gram: DMatrix<f64>,
    /// `Xᵀ W X + S_λ`.
    pub hessian: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Penalized log-likelihood after each accepted iteration.
    pub trace: Vec<f64>,
}

struct Eval {
    ll: f64,
    score: Vec<f64>,
    weight: Vec<f64>,
}

fn evaluate(problem: &PenalizedProblem, lik: &dyn Likelihood, eta: &[f64]) -> Eval {
    let n = eta.len();
    let mut ll = 0.0;
    let mut score = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        let t = lik.eval(i, problem.y[i], eta[i]);
        ll += t.ll;
        score.push(t.score);
        weight.push(t.weight);
    }
    Eval { ll, score, weight }
}

fn quad(theta: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    theta.dot(&(s * theta))
}

/// Cholesky with increasing diagonal jitter when the matrix is numerically
/// indefinite.
fn robust_cholesky(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Ok(c);
    }
    let scale = h.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut eps = 1e-12 * scale;
    for _ in 0..12 {
        let mut hj = h.clone();
        for d in 0..hj.nrows() {
            hj[(d, d)] += eps;
        }
        if let Some(c) = Cholesky::new(hj) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::numerical("penalized Hessian is not positive definite"))
}

/// `ℓ(θ) − ½ θᵀ S_λ θ`.
pub fn penalized_loglik(problem: &PenalizedProblem, lik: &dyn Likelihood, lambda: &[f64], theta: &DVector<f64>) -> f64 {
    let eta = problem.linear_predictor(theta);
    let ll: f64 = (0..eta.len()).map(|i| lik.eval(i, problem.y[i], eta[i]).ll).sum();
    ll - 0.5 * quad(theta, &problem.penalty_matrix(lambda))
}

/// Gradient of [`penalized_loglik`]: `Xᵀ ∂ℓ/∂η − S_λ θ`.
pub fn penalized_score(problem: &PenalizedProblem, lik: &dyn Likelihood, lambda: &[f64], theta: &DVector<f64>) -> DVector<f64> {
    let eta = problem.linear_predictor(theta);
    let score: Vec<f64> = (0..eta.len()).map(|i| lik.eval(i, problem.y[i], eta[i]).score).collect();
    problem.x.tr_mul_vec(&score) - problem.penalty_matrix(lambda) * theta
}

/// Newton iteration on the penalized log-likelihood with step halving.
/// Starts from `start` when given, otherwise from one working-response
/// step around the data.
pub fn pirls(
    problem: &PenalizedProblem,
    lik: &dyn Likelihood,
    lambda: &[f64],
    start: Option<&DVector<f64>>,
    opts: PirlsOptions,
) -> Result<PirlsFit> {
    if lambda.len() != problem.terms.len() {
        return Err(Error::invalid("one smoothing parameter per penalty term required"));
    }
    if lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::invalid("smoothing parameters must be finite and non-negative"));
    }
    let s = problem.penalty_matrix(lambda);
    let mut theta = match start {
        Some(t) if t.len() == problem.ncols() => t.clone(),
        _ => {
            let eta0: Vec<f64> = (0..problem.nobs()).map(|i| lik.initial_eta(i, problem.y[i])).collect();
            let e = evaluate(problem, lik, &eta0);
            let rhs: Vec<f64> = (0..eta0.len())
                .map(|i| e.weight[i] * (eta0[i] - problem.offset[i]) + e.score[i])
                .collect();
            let h = problem.x.weighted_gram(&e.weight) + &s;
            robust_cholesky(&h)?.solve(&problem.x.tr_mul_vec(&rhs))
        }
    };

    let mut eta = problem.linear_predictor(&theta);
    let mut cur = evaluate(problem, lik, &eta);
    let mut lp = cur.ll - 0.5 * quad(&theta, &s);
    if !lp.is_finite() {
        theta.fill(0.0);
        eta = problem.linear_predictor(&theta);
        cur = evaluate(problem, lik, &eta);
        lp = cur.ll;
        if !lp.is_finite() {
            return Err(Error::numerical("non-finite log-likelihood at the starting point"));
        }
    }
    let mut trace = vec![lp];
    let mut gnorm = f64::INFINITY;
    let mut stalled = false;
    for iter in 0..=opts.max_iter {
        let grad = problem.x.tr_mul_vec(&cur.score) - &s * &theta;
        gnorm = grad.amax();
        let gram = problem.x.weighted_gram(&cur.weight);
        let hessian = &gram + &s;
        // steps that no longer change ℓ_p only count at the rounding floor
        let at_floor = gnorm < 1e-5 * (1.0 + lp.abs());
        let converged = gnorm < opts.tol * (1.0 + lp.abs()) || ((stalled || iter == opts.max_iter) && at_floor);
        if converged || iter == opts.max_iter {
            if !converged {
                break;
            }
            let chol = robust_cholesky(&hessian)?;
            return Ok(PirlsFit {
                theta,
                eta,
                loglik: cur.ll,
                penalized: lp,
                weights: cur.weight,
                gram,
                hessian,
                chol,
                iterations: iter,
                gradient_norm: gnorm,
                trace,
            });
        }
        let delta = robust_cholesky(&hessian)?.solve(&grad);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta + &delta * alpha;
            let cand_eta = problem.linear_predictor(&cand);
            let e = evaluate(problem, lik, &cand_eta);
            let cand_lp = e.ll - 0.5 * quad(&cand, &s);
            if cand_lp.is_finite() && cand_lp >= lp {
                stalled = cand_lp == lp;
                theta = cand;
                eta = cand_eta;
                cur = e;
                lp = cand_lp;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // no representable ascent: accept when at the rounding floor
            if gnorm < 1e-5 * (1.0 + lp.abs()) {
                let chol = robust_cholesky(&hessian)?;
                return Ok(PirlsFit {
                    theta,
                    eta,
                    loglik: cur.ll,
                    penalized: lp,
                    weights: cur.weight,
                    gram,
                    hessian,
                    chol,
                    iterations: iter,
                    gradient_norm: gnorm,
                    trace,
                });
            }
            return Err(Error::NoConvergence {
                iterations: iter,
                gradient: gnorm,
            });
        }
        trace.push(lp);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        gradient: gnorm,
    })
}
