use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// B-spline basis on equally spaced knots covering `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PSplineBasis {
    pub knots: Vec<f64>,
    pub k: usize,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
}

impl PSplineBasis {
    pub fn fit(x: &[f64], k: usize, degree: usize) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("spline covariate must be finite"));
        }
        let mut distinct = x.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        if k > distinct.len() {
            return Err(Error::invalid(format!(
                "basis size {k} exceeds the {} distinct covariate values",
                distinct.len()
            )));
        }
        let lo = distinct[0];
        let hi = *distinct.last().unwrap();
        if !(hi > lo) {
            return Err(Error::invalid("spline covariate has zero range"));
        }
        Ok(Self::on_range(lo, hi, k, degree))
    }

    pub fn on_range(lo: f64, hi: f64, k: usize, degree: usize) -> Self {
        let h = (hi - lo) / (k - degree) as f64;
        let knots = (0..=k + degree)
            .map(|j| lo + (j as f64 - degree as f64) * h)
            .collect();
        PSplineBasis {
            knots,
            k,
            degree,
            lo,
            hi,
        }
    }

    fn span(&self, x: f64) -> usize {
        let h = self.knots[1] - self.knots[0];
        let raw = ((x - self.lo) / h).floor() as isize + self.degree as isize;
        raw.clamp(self.degree as isize, self.k as isize - 1) as usize
    }

    /// Design rows for `x`; values outside the fitted range are clamped to it.
    pub fn design(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.len(), self.k);
        for (row, &xi) in x.iter().enumerate() {
            if !xi.is_finite() {
                return Err(Error::invalid("spline covariate must be finite"));
            }
            let xi = xi.clamp(self.lo, self.hi);
            let span = self.span(xi);
            let vals = bspline_basis_values(&self.knots, self.degree, xi, span);
            for (r, v) in vals.into_iter().enumerate() {
                out[(row, span - self.degree + r)] = v;
            }
        }
        Ok(out)
    }
}

/// The `degree + 1` non-zero B-spline values at `x` in knot span `span`
/// (triangular de Boor–Cox scheme).
pub fn bspline_basis_values(knots: &[f64], degree: usize, x: f64, span: usize) -> Vec<f64> {
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Textbook recursive definition, evaluated independently per function.
    fn cox_de_boor(knots: &[f64], j: usize, p: usize, x: f64, last: bool) -> f64 {
        if p == 0 {
            let inside = knots[j] <= x && x < knots[j + 1];
            // closed right end on the final interval of the domain
            let at_end = last && x == knots[j + 1];
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[j + p] - knots[j];
        if d1 > 0.0 {
            v += (x - knots[j]) / d1 * cox_de_boor(knots, j, p - 1, x, last);
        }
        let d2 = knots[j + p + 1] - knots[j + 1];
        if d2 > 0.0 {
            v += (knots[j + p + 1] - x) / d2 * cox_de_boor(knots, j + 1, p - 1, x, last);
        }
        v
    }

    #[test]
    fn matches_recursive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let basis = PSplineBasis::on_range(-2.0, 5.0, 12, 3);
        let xs: Vec<f64> = (0..50).map(|_| -2.0 + 7.0 * rng.random::<f64>()).collect();
        let design = basis.design(&xs).unwrap();
        for (row, &x) in xs.iter().enumerate() {
            for j in 0..12 {
                let oracle = cox_de_boor(&basis.knots, j, 3, x, false);
                assert!((design[(row, j)] - oracle).abs() < 1e-12, "x={x} j={j}");
            }
        }
    }

    #[test]
    fn right_endpoint_is_covered() {
        let basis = PSplineBasis::on_range(0.0, 1.0, 8, 3);
        let d = basis.design(&[1.0, 0.0]).unwrap();
        assert!((d.row(0).sum() - 1.0).abs() < 1e-14);
        assert!((d[(0, 7)] - 1.0 / 6.0).abs() < 1e-14);
        assert!((d[(1, 0)] - 1.0 / 6.0).abs() < 1e-14);
    }
}
