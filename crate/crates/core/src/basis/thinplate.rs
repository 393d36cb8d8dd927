use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::constraints_null_space;

/// Thin-plate radial function for two dimensions and second-order
/// penalty: `η(r) = r² log r / (8π)`, `η(0) = 0`.
pub fn tps_radial(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln() / (8.0 * std::f64::consts::PI)
    }
}

/// Rank-`k` thin-plate regression spline: the radial block is truncated to
/// the `k` eigenvectors of `E` with the largest absolute eigenvalues, and the
/// side condition `Tᵀδ = 0` is absorbed into the truncated coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinPlateBasis {
    pub centers: Vec<[f64; 2]>,
    /// `n × (k−3)` map from reduced coefficients to radial weights `δ`.
    pub radial_map: DMatrix<f64>,
    /// Penalty on the reduced radial coefficients.
    pub wiggly_penalty: DMatrix<f64>,
    pub k: usize,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl ThinPlateBasis {
    pub fn fit(points: &[[f64; 2]], k: usize) -> Result<Self> {
        let n = points.len();
        if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::invalid("thin-plate coordinates must be finite"));
        }
        let mut distinct: Vec<[u64; 2]> = points.iter().map(|p| [p[0].to_bits(), p[1].to_bits()]).collect();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < k {
            return Err(Error::invalid(format!(
                "thin-plate rank {k} needs at least {k} distinct points, found {}",
                distinct.len()
            )));
        }
        let e = DMatrix::from_fn(n, n, |i, j| tps_radial(dist(points[i], points[j])));
        let t = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => points[i][0],
            _ => points[i][1],
        });
        let sv = t.clone().svd(false, false).singular_values;
        if sv.min() <= 1e-10 * sv.max() {
            return Err(Error::invalid("thin-plate points are collinear"));
        }

        let eig = SymmetricEigen::new(e);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .partial_cmp(&eig.eigenvalues[a].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        let top = eig.eigenvalues[order[0]].abs();
        if eig.eigenvalues[order[k - 1]].abs() <= 1e-10 * top {
            return Err(Error::numerical(
                "radial system is rank deficient below the requested rank (coincident points?)",
            ));
        }
        let mut u_k = DMatrix::zeros(n, k);
        let mut d_k = DVector::zeros(k);
        for (c, &idx) in order.iter().take(k).enumerate() {
            let mut col = eig.eigenvectors.column(idx).into_owned();
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, 0.0_f64), |acc, (i, &v)| if v.abs() > acc.1 + 1e-12 { (i, v.abs()) } else { acc });
            if col[imax] < 0.0 {
                col.neg_mut();
            }
            u_k.set_column(c, &col);
            d_k[c] = eig.eigenvalues[idx];
        }
        let z = constraints_null_space(&(t.transpose() * &u_k))?;
        let radial_map = &u_k * &z;
        let mut wiggly_penalty = z.transpose() * DMatrix::from_diagonal(&d_k) * &z;
        wiggly_penalty = (&wiggly_penalty + wiggly_penalty.transpose()) * 0.5;
        Ok(ThinPlateBasis {
            centers: points.to_vec(),
            radial_map,
            wiggly_penalty,
            k,
        })
    }

    /// `[E(x, centers) · radial_map, 1, x₁, x₂]`.
    pub fn design(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        let m = points.len();
        let n = self.centers.len();
        let e = DMatrix::from_fn(m, n, |i, j| tps_radial(dist(points[i], self.centers[j])));
        let wiggly = e * &self.radial_map;
        let mut out = DMatrix::zeros(m, self.k);
        out.view_mut((0, 0), (m, self.k - 3)).copy_from(&wiggly);
        for (i, p) in points.iter().enumerate() {
            out[(i, self.k - 3)] = 1.0;
            out[(i, self.k - 2)] = p[0];
            out[(i, self.k - 1)] = p[1];
        }
        out
    }

    pub fn penalty(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.k, self.k);
        s.view_mut((0, 0), (self.k - 3, self.k - 3)).copy_from(&self.wiggly_penalty);
        s
    }

    /// Radial weights `δ` and polynomial part `(α₀, α₁, α₂)` of a coefficient
    /// vector in the unconstrained (width `k`) parameterization.
    pub fn expand(&self, beta: &DVector<f64>) -> (DVector<f64>, [f64; 3]) {
        let delta = &self.radial_map * beta.rows(0, self.k - 3);
        (delta, [beta[self.k - 3], beta[self.k - 2], beta[self.k - 1]])
    }
}
