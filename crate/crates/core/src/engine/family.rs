use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, ln_rising, trigamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Var = μ + μ²/φ.
    NegativeBinomial,
    /// Var = φμ, first two moments only.
    Quasi,
    /// Identity link, Var = φ.
    Gaussian,
}

/// One observation's contribution: log-likelihood, derivative with respect
/// to the linear predictor, and the (positive) negative second derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsTerms {
    pub ll: f64,
    pub score: f64,
    pub weight: f64,
}

/// Per-observation likelihood in the linear predictor.
pub trait Likelihood: Sync {
    fn eval(&self, i: usize, y: f64, eta: f64) -> ObsTerms;
    /// Linear predictor used to start the iteration from the data.
    fn initial_eta(&self, i: usize, y: f64) -> f64;
    /// Mean on the response scale.
    fn mean(&self, eta: f64) -> f64 {
        eta.exp()
    }
}

/// Log pmf of the negative binomial with mean `mu` and size `phi`.
pub fn nb_logpmf(y: f64, mu: f64, phi: f64) -> f64 {
    let denom = phi + mu;
    let body = if y <= 64.0 && y.fract() == 0.0 {
        // y·log μ + Σ_j log((φ+j)/(φ+μ)), stable as φ → ∞
        let mut s = if y > 0.0 { y * mu.ln() } else { 0.0 };
        for j in 0..y as u64 {
            s += ((j as f64 - mu) / denom).ln_1p();
        }
        s
    } else {
        ln_rising(phi, y) + y * (mu.ln() - denom.ln())
    };
    body - ln_factorial(y) - phi * (mu / phi).ln_1p()
}

fn ln_factorial(y: f64) -> f64 {
    if y <= 64.0 && y.fract() == 0.0 {
        (2..=y as u64).map(|j| (j as f64).ln()).sum()
    } else {
        ln_gamma(y + 1.0)
    }
}

/// Sum of negative-binomial log pmf values.
pub fn nb_loglik(y: &[f64], mu: &[f64], phi: f64) -> Result<f64> {
    if y.len() != mu.len() {
        return Err(Error::invalid("y and mu differ in length"));
    }
    if !(phi > 0.0) {
        return Err(Error::invalid("dispersion must be positive"));
    }
    let mut total = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        if !mi.is_finite() || mi <= 0.0 {
            return Err(Error::invalid(format!("mean must be finite and positive, got {mi}")));
        }
        total += nb_logpmf(yi, mi, phi);
    }
    Ok(total)
}

/// `P(Y ≤ y)` for the negative binomial; 0 for `y < 0`.
pub fn nb_cdf(y: f64, mu: f64, phi: f64) -> f64 {
    if y < 0.0 {
        return 0.0;
    }
    if y <= 64.0 {
        let mut acc = 0.0;
        for v in 0..=(y as u64) {
            acc += nb_logpmf(v as f64, mu, phi).exp();
        }
        return acc.min(1.0);
    }
    beta_reg(phi, y.floor() + 1.0, phi / (phi + mu))
}

fn log_start(y: f64) -> f64 {
    (y + 0.1).ln()
}

/// Negative binomial with log link; scalar or per-observation size.
#[derive(Debug, Clone, PartialEq)]
pub enum NegBin {
    Scalar(f64),
    PerObs(Vec<f64>),
}

impl NegBin {
    fn phi(&self, i: usize) -> f64 {
        match self {
            NegBin::Scalar(p) => *p,
            NegBin::PerObs(v) => v[i],
        }
    }
}

impl Likelihood for NegBin {
    fn eval(&self, i: usize, y: f64, eta: f64) -> ObsTerms {
        let phi = self.phi(i);
        let mu = eta.exp();
        let d = mu + phi;
        ObsTerms {
            ll: nb_logpmf(y, mu, phi),
            score: phi * (y - mu) / d,
            weight: (y + phi) * mu * phi / (d * d),
        }
    }

    fn initial_eta(&self, _i: usize, y: f64) -> f64 {
        log_start(y)
    }
}

/// Poisson quasi-likelihood `(y log μ − μ)/φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiPoisson {
    pub phi: f64,
}

impl Likelihood for QuasiPoisson {
    fn eval(&self, _i: usize, y: f64, eta: f64) -> ObsTerms {
        let mu = eta.exp();
        let ll = if y > 0.0 { y * eta } else { 0.0 } - mu;
        ObsTerms {
            ll: ll / self.phi,
            score: (y - mu) / self.phi,
            weight: mu / self.phi,
        }
    }

    fn initial_eta(&self, _i: usize, y: f64) -> f64 {
        log_start(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub scale: f64,
}

impl Likelihood for Gaussian {
    fn eval(&self, _i: usize, y: f64, eta: f64) -> ObsTerms {
        let r = y - eta;
        ObsTerms {
            ll: -0.5 * r * r / self.scale - 0.5 * (2.0 * std::f64::consts::PI * self.scale).ln(),
            score: r / self.scale,
            weight: 1.0 / self.scale,
        }
    }

    fn initial_eta(&self, _i: usize, y: f64) -> f64 {
        y
    }

    fn mean(&self, eta: f64) -> f64 {
        eta
    }
}

/// Negative binomial with known means, linear predictor `η = log σ` on the
/// overdispersion (`Var = μ + σμ²`, size `1/σ`).
#[derive(Debug, Clone, PartialEq)]
pub struct NbScale {
    pub mu: Vec<f64>,
}

impl Likelihood for NbScale {
    fn eval(&self, i: usize, y: f64, eta: f64) -> ObsTerms {
        let mu = self.mu[i];
        let r = (-eta).exp();
        let rm = r + mu;
        let lr = digamma(y + r) - digamma(r) + (r / rm).ln() + (mu - y) / rm;
        let lrr = trigamma(y + r) - trigamma(r) + 1.0 / r - 1.0 / rm - (mu - y) / (rm * rm);
        let second = r * r * lrr + r * lr;
        ObsTerms {
            ll: nb_logpmf(y, mu, r),
            score: -r * lr,
            weight: (-second).max(1e-10),
        }
    }

    fn initial_eta(&self, i: usize, y: f64) -> f64 {
        // moment guess (y − μ)² ≈ μ + σμ²
        let mu = self.mu[i];
        let s = ((y - mu).powi(2) - mu) / (mu * mu);
        s.clamp(0.05, 20.0).ln()
    }

    fn mean(&self, eta: f64) -> f64 {
        eta.exp()
    }
}
