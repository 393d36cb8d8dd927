//! Rubin's rules for combining estimates across imputed datasets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::engine::FitResult;
use crate::error::{Error, Result};

/// Coefficient vector with covariance, labelled by name.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEstimate {
    pub names: Vec<String>,
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub within: f64,
    pub between: f64,
    /// Degrees of freedom of the reference t distribution (infinite when
    /// the between variance vanishes).
    pub df: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub k: usize,
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    /// `V̄`, mean within-imputation covariance.
    pub within: Vec<Vec<f64>>,
    /// `B̄`, between-imputation covariance with divisor `K − 1`.
    pub between: Vec<Vec<f64>>,
    /// `V̄ + (1 + 1/K) B̄`.
    pub total: Vec<Vec<f64>>,
    pub rows: Vec<PooledRow>,
}

impl PooledEstimate {
    pub fn row(&self, name: &str) -> Option<&PooledRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn total_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.total)
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.len();
    DMatrix::from_fn(p, p, |i, j| rows[i][j])
}

/// Reorders `e` to the name order `names`.
fn align(e: &NamedEstimate, names: &[String]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if e.names.len() != names.len() || e.estimate.len() != names.len() || e.covariance.nrows() != names.len() {
        return Err(Error::invalid("pooled estimates differ in dimension"));
    }
    let idx = names
        .iter()
        .map(|n| {
            e.names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::invalid(format!("coefficient '{n}' missing from an imputation")))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = names.len();
    Ok((
        DVector::from_fn(p, |i, _| e.estimate[idx[i]]),
        DMatrix::from_fn(p, p, |i, j| e.covariance[(idx[i], idx[j])]),
    ))
}

/// Pools `K ≥ 2` estimates; coefficients are matched by name and reported in
/// the order of the first estimate.
pub fn rubin_pool(estimates: &[NamedEstimate]) -> Result<PooledEstimate> {
    let k = estimates.len();
    if k < 2 {
        return Err(Error::invalid("pooling needs at least two imputations"));
    }
    let names = estimates[0].names.clone();
    let mut seen = names.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != names.len() {
        return Err(Error::invalid("duplicate coefficient names"));
    }
    let aligned = estimates.iter().map(|e| align(e, &names)).collect::<Result<Vec<_>>>()?;
    let p = names.len();
    let kf = k as f64;
    let mut mean = DVector::zeros(p);
    let mut within = DMatrix::zeros(p, p);
    for (est, cov) in &aligned {
        mean += est;
        within += cov;
    }
    mean /= kf;
    within /= kf;
    let mut between = DMatrix::zeros(p, p);
    for (est, _) in &aligned {
        let d = est - &mean;
        between += &d * d.transpose();
    }
    between /= kf - 1.0;
    let total = &within + &between * (1.0 + 1.0 / kf);

    let rows = (0..p)
        .map(|j| {
            let w = within[(j, j)];
            let b = between[(j, j)];
            let t = total[(j, j)];
            let se = t.max(0.0).sqrt();
            let r = (1.0 + 1.0 / kf) * b / w;
            let df = if b > 0.0 && w > 0.0 {
                (kf - 1.0) * (1.0 + 1.0 / r).powi(2)
            } else if b > 0.0 {
                kf - 1.0
            } else {
                f64::INFINITY
            };
            let q = if df.is_finite() && df < 1e7 {
                StudentsT::new(0.0, 1.0, df).expect("positive df").inverse_cdf(0.975)
            } else {
                crate::special::norm_quantile(0.975)
            };
            PooledRow {
                name: names[j].clone(),
                estimate: mean[j],
                se,
                within: w,
                between: b,
                df,
                lower: mean[j] - q * se,
                upper: mean[j] + q * se,
            }
        })
        .collect();
    Ok(PooledEstimate {
        k,
        names,
        estimate: mean.iter().copied().collect(),
        within: to_rows(&within),
        between: to_rows(&between),
        total: to_rows(&total),
        rows,
    })
}

/// Treatment of the offset constant `ĉ` when pooling model fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CPooling {
    /// `ĉ` pooled like any coefficient, with its profile standard error.
    #[default]
    Pooled,
    /// `ĉ` shared by all fits and excluded from pooling.
    Fixed,
}

/// Unpenalized coefficients of a fit, plus `c` in pooled mode.
pub fn fit_estimate(fit: &FitResult, mode: CPooling) -> NamedEstimate {
    let p = fit.fixed_names.len();
    let extra = usize::from(mode == CPooling::Pooled);
    let mut names = fit.fixed_names.clone();
    let mut estimate = DVector::zeros(p + extra);
    let mut covariance = DMatrix::zeros(p + extra, p + extra);
    for (j, n) in fit.fixed_names.iter().enumerate() {
        estimate[j] = fit.coefficient(n).map_or(f64::NAN, |c| c.estimate);
        for l in 0..p {
            covariance[(j, l)] = fit.fixed_covariance[j][l];
        }
    }
    if extra == 1 {
        names.push("c".into());
        estimate[p] = fit.c_hat;
        covariance[(p, p)] = fit.c_se.map_or(0.0, |s| s * s);
    }
    NamedEstimate {
        names,
        estimate,
        covariance,
    }
}

/// Pools per-imputation model fits.
pub fn pool_fits(fits: &[FitResult], mode: CPooling) -> Result<PooledEstimate> {
    if mode == CPooling::Fixed {
        if let Some(first) = fits.first() {
            if fits.iter().any(|f| f.c_hat != first.c_hat) {
                return Err(Error::invalid("fixed-c pooling requires the same c in every fit"));
            }
        }
    }
    if mode == CPooling::Pooled && fits.iter().any(|f| f.c_se.is_none()) {
        log::warn!("some fits lack a standard error for c; their within variance for c is taken as zero");
    }
    let estimates: Vec<NamedEstimate> = fits.iter().map(|f| fit_estimate(f, mode)).collect();
    rubin_pool(&estimates)
}
