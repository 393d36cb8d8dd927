//! Design/penalty blocks for the penalized terms of the models: cubic
//! P-splines, low-rank thin-plate surfaces and ridge-penalized indicators.

mod pspline;
mod thinplate;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{constraint_null_space, sym_eigen_desc};

pub use pspline::{bspline_basis_values, PSplineBasis};
pub use thinplate::{tps_radial, ThinPlateBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothKind {
    Pspline,
    Thinplate,
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothSpec {
    pub kind: SmoothKind,
    /// Basis dimension before any constraint.
    pub k: usize,
    /// B-spline degree (P-splines only).
    pub degree: usize,
    /// Difference order of the penalty (P-splines only).
    pub diff_order: usize,
    /// Absorb a sum-to-zero constraint.
    pub constrained: bool,
}

impl SmoothSpec {
    pub fn pspline(k: usize) -> Self {
        SmoothSpec {
            kind: SmoothKind::Pspline,
            k,
            degree: 3,
            diff_order: 2,
            constrained: true,
        }
    }

    pub fn thinplate(k: usize) -> Self {
        SmoothSpec {
            kind: SmoothKind::Thinplate,
            k,
            degree: 0,
            diff_order: 0,
            constrained: true,
        }
    }

    pub fn ridge() -> Self {
        SmoothSpec {
            kind: SmoothKind::Ridge,
            k: 0,
            degree: 0,
            diff_order: 0,
            constrained: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SmoothKind::Pspline => {
                if self.k < 3 {
                    return Err(Error::invalid("spline basis size must be at least 3"));
                }
                if self.diff_order >= self.k {
                    return Err(Error::invalid("difference order must be below the basis size"));
                }
                if self.degree == 0 || self.k <= self.degree {
                    return Err(Error::invalid("basis size must exceed the spline degree"));
                }
            }
            SmoothKind::Thinplate => {
                if self.k < 4 {
                    return Err(Error::invalid("thin-plate rank must be at least 4"));
                }
            }
            SmoothKind::Ridge => {}
        }
        Ok(())
    }
}

/// One penalized term: design columns with their penalty matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisBlock {
    pub label: String,
    pub kind: SmoothKind,
    /// Rows are observations (or districts, for district-level terms).
    pub design: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub null_space_dim: usize,
    /// Reparameterization applied by constraint absorption: original
    /// coefficients are `constraint · new coefficients`.
    pub constraint: Option<DMatrix<f64>>,
}

impl BasisBlock {
    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }

    /// Penalty quadratic form `βᵀ S β`.
    pub fn penalty_form(&self, beta: &DVector<f64>) -> f64 {
        (beta.transpose() * &self.penalty * beta)[(0, 0)]
    }
}

/// Number of eigenvalues of a symmetric PSD matrix below `1e-9 · max`.
pub fn null_space_dim(s: &DMatrix<f64>) -> usize {
    let (vals, _) = sym_eigen_desc(s);
    let max = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return s.nrows();
    }
    vals.iter().filter(|&&v| v.abs() <= 1e-9 * max).count()
}

/// Cubic (by default) B-spline design on equally spaced knots with a
/// difference penalty `DᵀD`.
pub fn pspline_block(x: &[f64], spec: &SmoothSpec, label: &str) -> Result<BasisBlock> {
    if spec.kind != SmoothKind::Pspline {
        return Err(Error::invalid("pspline_block needs a pspline spec"));
    }
    spec.validate()?;
    let basis = PSplineBasis::fit(x, spec.k, spec.degree)?;
    let block = BasisBlock {
        label: label.to_string(),
        kind: SmoothKind::Pspline,
        design: basis.design(x)?,
        penalty: difference_penalty(spec.k, spec.diff_order),
        null_space_dim: spec.diff_order,
        constraint: None,
    };
    if spec.constrained {
        absorb_sum_to_zero(&block)
    } else {
        Ok(block)
    }
}

/// `DᵀD` for the order-`order` difference operator on `k` coefficients.
pub fn difference_penalty(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows();
        d = DMatrix::from_fn(rows - 1, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d.transpose() * d
}

/// Low-rank thin-plate surface over 2-D points.
pub fn thinplate_block(points: &[[f64; 2]], spec: &SmoothSpec, label: &str) -> Result<(BasisBlock, ThinPlateBasis)> {
    if spec.kind != SmoothKind::Thinplate {
        return Err(Error::invalid("thinplate_block needs a thinplate spec"));
    }
    spec.validate()?;
    let basis = ThinPlateBasis::fit(points, spec.k)?;
    let block = BasisBlock {
        label: label.to_string(),
        kind: SmoothKind::Thinplate,
        design: basis.design(points),
        penalty: basis.penalty(),
        null_space_dim: 3,
        constraint: None,
    };
    let block = if spec.constrained {
        absorb_sum_to_zero(&block)?
    } else {
        block
    };
    Ok((block, basis))
}

/// Indicator columns for `levels` categories with an identity penalty.
pub fn ridge_block(labels: &[usize], levels: usize, label: &str) -> Result<BasisBlock> {
    if levels < 2 {
        return Err(Error::invalid("ridge term needs at least two levels"));
    }
    let mut design = DMatrix::zeros(labels.len(), levels);
    for (row, &l) in labels.iter().enumerate() {
        if l >= levels {
            return Err(Error::invalid(format!("level {l} out of range")));
        }
        design[(row, l)] = 1.0;
    }
    Ok(BasisBlock {
        label: label.to_string(),
        kind: SmoothKind::Ridge,
        design,
        penalty: DMatrix::identity(levels, levels),
        null_space_dim: 0,
        constraint: None,
    })
}

/// Reparameterizes the block so every representable function sums to zero
/// over the block's rows. The penalty is transformed congruently.
pub fn absorb_sum_to_zero(block: &BasisBlock) -> Result<BasisBlock> {
    if block.ncols() < 2 {
        return Err(Error::invalid("constraint absorption needs at least two columns"));
    }
    let sums = DVector::from_iterator(block.ncols(), block.design.column_iter().map(|c| c.sum()));
    let z = constraint_null_space(&sums)?;
    let design = &block.design * &z;
    let mut penalty = z.transpose() * &block.penalty * &z;
    // exact symmetry
    penalty = (&penalty + penalty.transpose()) * 0.5;
    let null_space_dim = null_space_dim(&penalty);
    let constraint = match &block.constraint {
        Some(prev) => prev * &z,
        None => z,
    };
    Ok(BasisBlock {
        label: block.label.clone(),
        kind: block.kind,
        design,
        penalty,
        null_space_dim,
        constraint: Some(constraint),
    })
}
