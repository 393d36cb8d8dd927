use nalgebra::DMatrix;

use super::{PenalizedProblem, PirlsFit};
use crate::error::Result;
use crate::linalg::chol_logdet;

#[derive(Debug, Clone)]
pub struct RemlEval {
    pub value: f64,
    pub fit: PirlsFit,
}

/// Laplace-approximate restricted log-likelihood at a converged inner fit:
/// `ℓ_p(θ̂) + ½ log|S_λ|₊ − ½ log|H| + (M_p/2) log 2π`.
pub fn reml_criterion(problem: &PenalizedProblem, lambda: &[f64], fit: &PirlsFit) -> Result<f64> {
    let mut log_s = 0.0;
    for (t, &l) in problem.terms.iter().zip(lambda) {
        if !(l > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        log_s += t.rank as f64 * l.ln() + t.logdet;
    }
    let mp = problem.unpenalized_dim() as f64;
    Ok(fit.penalized + 0.5 * log_s - 0.5 * chol_logdet(&fit.chol)
        + 0.5 * mp * (2.0 * std::f64::consts::PI).ln())
}

/// Diagonal of `H⁻¹ XᵀWX` summed per penalty term; returns
/// `(total, per-term, unpenalized remainder)`.
pub fn edf_per_term(problem: &PenalizedProblem, fit: &PirlsFit) -> (f64, Vec<f64>, f64) {
    let hinv: DMatrix<f64> = fit.chol.inverse();
    let p = problem.ncols();
    let diag: Vec<f64> = (0..p)
        .map(|k| (0..p).map(|m| hinv[(k, m)] * fit.gram[(m, k)]).sum())
        .collect();
    let total: f64 = diag.iter().sum();
    let per: Vec<f64> = problem.terms.iter().map(|t| t.range().map(|k| diag[k]).sum()).collect();
    let rest = total - per.iter().sum::<f64>();
    (total, per, rest)
}
