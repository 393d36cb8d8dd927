//! Penalized likelihood estimation: PIRLS inner loop, Laplace REML outer
//! loop over log smoothing parameters (and dispersion), profile search for
//! the autoregressive offset constant, and conditional AIC.

mod family;
mod fit;
mod optim;
mod pirls;
mod reml;
mod smoothing;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{logdet_plus, Design};

pub use family::{nb_cdf, nb_loglik, nb_logpmf, Family, Gaussian, Likelihood, NbScale, NegBin, ObsTerms, QuasiPoisson};
pub use fit::{caic, fit_model, profile_c, summarize, CoefficientRow, FitOptions, FitResult, ProfileC, SmoothingRow, TermEdf};
pub use optim::{golden_section_max, nelder_mead_max, NelderMeadOptions, NelderMeadResult};
pub use pirls::{penalized_loglik, penalized_score, pirls, PirlsFit, PirlsOptions};
pub use reml::{edf_per_term, reml_criterion, RemlEval};
pub use smoothing::{optimize_smoothing, OuterFamily, SmoothingOptions, SmoothingResult};

/// Penalty `λ · S` on the coefficient range `start..start + dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerm {
    pub label: String,
    pub start: usize,
    pub s: DMatrix<f64>,
    pub rank: usize,
    /// Log generalized determinant of `s`.
    pub logdet: f64,
}

impl PenaltyTerm {
    pub fn new(label: impl Into<String>, start: usize, s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() != s.ncols() || s.nrows() == 0 {
            return Err(Error::invalid("penalty must be square and non-empty"));
        }
        let (logdet, rank) = logdet_plus(&s, 1e-9);
        if rank == 0 {
            return Err(Error::invalid("penalty is identically zero"));
        }
        Ok(PenaltyTerm {
            label: label.into(),
            start,
            s,
            rank,
            logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.dim()
    }
}

/// Response, CSR design, offset and penalties of one penalized GLM.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedProblem {
    pub x: Design,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub names: Vec<String>,
    pub terms: Vec<PenaltyTerm>,
}

impl PenalizedProblem {
    pub fn new(x: Design, y: Vec<f64>, offset: Vec<f64>, names: Vec<String>, terms: Vec<PenaltyTerm>) -> Result<Self> {
        if y.len() != x.nrows() || offset.len() != x.nrows() {
            return Err(Error::invalid("response, offset and design disagree in length"));
        }
        if names.len() != x.ncols() {
            return Err(Error::invalid("one name per design column required"));
        }
        if offset.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("response and offset must be finite"));
        }
        let mut covered = vec![false; x.ncols()];
        for t in &terms {
            if t.start + t.dim() > x.ncols() {
                return Err(Error::invalid(format!("penalty '{}' exceeds the design", t.label)));
            }
            for c in t.range() {
                if covered[c] {
                    return Err(Error::invalid("penalty ranges overlap"));
                }
                covered[c] = true;
            }
        }
        Ok(PenalizedProblem {
            x,
            y,
            offset,
            names,
            terms,
        })
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn nobs(&self) -> usize {
        self.y.len()
    }

    /// Dimension of the unpenalized space.
    pub fn unpenalized_dim(&self) -> usize {
        self.ncols() - self.terms.iter().map(|t| t.rank).sum::<usize>()
    }

    /// `Σ λⱼ Sⱼ` embedded in a `p × p` matrix.
    pub fn penalty_matrix(&self, lambda: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for (t, &l) in self.terms.iter().zip(lambda) {
            let r = t.start;
            let d = t.dim();
            let mut view = s.view_mut((r, r), (d, d));
            view += &t.s * l;
        }
        s
    }

    pub fn linear_predictor(&self, theta: &nalgebra::DVector<f64>) -> Vec<f64> {
        let xb = self.x.mul_vec(theta);
        xb.iter().zip(&self.offset).map(|(a, b)| a + b).collect()
    }
}
