//! Small linear-algebra helpers and a row-compressed design matrix.
//!
//! Model frames are mostly indicator columns, so the design is stored in CSR
//! form and every product the fitting loop needs (`Xθ`, `Xᵀv`, `XᵀWX`) walks
//! only the stored entries.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense columns shared by groups of rows: row `i` carries
/// `values.row(groups[i])` in columns `start..start + values.ncols()`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBlock {
    pub start: usize,
    pub groups: Vec<usize>,
    pub values: DMatrix<f64>,
}

impl GroupedBlock {
    fn end(&self) -> usize {
        self.start + self.values.ncols()
    }
}

/// Compressed sparse row design matrix, optionally with one grouped dense
/// column block (district-level smooths repeated over many rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    grouped: Option<GroupedBlock>,
}

impl Design {
    /// Builds a design from per-row `(column, value)` lists. Columns inside a
    /// row are sorted; duplicates are summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if c >= ncols {
                    return Err(Error::invalid(format!(
                        "column {c} out of range for {ncols} columns"
                    )));
                }
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Design {
            nrows,
            ncols,
            row_ptr,
            cols,
            vals,
            grouped: None,
        })
    }

    /// Every entry of a dense matrix becomes a stored entry, zeros included.
    pub fn from_dense(x: &DMatrix<f64>) -> Self {
        let rows = (0..x.nrows())
            .map(|i| (0..x.ncols()).map(|j| (j, x[(i, j)])).collect())
            .collect();
        Design::from_rows(x.ncols(), rows).expect("dense columns are in range")
    }

    /// Attaches a grouped dense block; the sparse part must have no entries
    /// in the block's columns.
    pub fn with_grouped_block(mut self, block: GroupedBlock) -> Result<Self> {
        if self.grouped.is_some() {
            return Err(Error::invalid("design already has a grouped block"));
        }
        if block.groups.len() != self.nrows || block.end() > self.ncols {
            return Err(Error::invalid("grouped block does not fit the design"));
        }
        if block.groups.iter().any(|&g| g >= block.values.nrows()) {
            return Err(Error::invalid("grouped block references a missing group"));
        }
        if self.cols.iter().any(|&c| c >= block.start && c < block.end()) {
            return Err(Error::invalid("grouped block overlaps stored sparse entries"));
        }
        self.grouped = Some(block);
        Ok(self)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len() + self.grouped.as_ref().map_or(0, |g| self.nrows * g.values.ncols())
    }

    fn sparse_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    /// Stored entries of row `i` in column order.
    pub fn row(&self, i: usize) -> Box<dyn Iterator<Item = (usize, f64)> + '_> {
        match &self.grouped {
            None => Box::new(self.sparse_row(i)),
            Some(g) => {
                let (start, end) = (g.start, g.end());
                let gi = g.groups[i];
                Box::new(
                    self.sparse_row(i)
                        .filter(move |&(c, _)| c < start)
                        .chain((0..g.values.ncols()).map(move |j| (start + j, g.values[(gi, j)])))
                        .chain(self.sparse_row(i).filter(move |&(c, _)| c >= end)),
                )
            }
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if let Some(g) = &self.grouped {
            if j >= g.start && j < g.end() {
                return g.values[(g.groups[i], j - g.start)];
            }
        }
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(pos) => self.vals[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                x[(i, j)] = v;
            }
        }
        x
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, j)).collect()
    }

    /// Overwrites sparse column `j`, which must be stored in every row.
    pub fn set_column(&mut self, j: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.nrows {
            return Err(Error::invalid("column length does not match row count"));
        }
        for (i, &v) in values.iter().enumerate() {
            let range = self.row_ptr[i]..self.row_ptr[i + 1];
            let pos = self.cols[range.clone()].binary_search(&j).map_err(|_| {
                Error::invalid(format!("column {j} is not stored in row {i}"))
            })?;
            self.vals[range.start + pos] = v;
        }
        Ok(())
    }

    /// Multiplies every stored entry of column `j` by `factor`.
    pub fn scale_column(&mut self, j: usize, factor: f64) {
        if let Some(g) = &mut self.grouped {
            if j >= g.start && j < g.end() {
                let mut col = g.values.column_mut(j - g.start);
                col *= factor;
                return;
            }
        }
        for (c, v) in self.cols.iter().zip(self.vals.iter_mut()) {
            if *c == j {
                *v *= factor;
            }
        }
    }

    /// Reorders columns: new column `k` is old column `perm[k]`. The result
    /// is plain CSR.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.ncols {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let mut inverse = vec![usize::MAX; self.ncols];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let rows = (0..self.nrows)
            .map(|i| self.row(i).map(|(c, v)| (inverse[c], v)).collect())
            .collect();
        Design::from_rows(self.ncols, rows)
    }

    pub fn mul_vec(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|i| self.sparse_row(i).map(|(j, v)| v * beta[j]).sum::<f64>()),
        );
        if let Some(g) = &self.grouped {
            let per_group = &g.values * beta.rows(g.start, g.values.ncols());
            for (i, o) in out.iter_mut().enumerate() {
                *o += per_group[g.groups[i]];
            }
        }
        out
    }

    pub fn tr_mul_vec(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (j, x) in self.sparse_row(i) {
                out[j] += x * vi;
            }
        }
        if let Some(g) = &self.grouped {
            let mut sums = DVector::zeros(g.values.nrows());
            for (i, &vi) in v.iter().enumerate() {
                sums[g.groups[i]] += vi;
            }
            let part = g.values.tr_mul(&sums);
            let mut view = out.rows_mut(g.start, g.values.ncols());
            view += part;
        }
        out
    }

    /// `Xᵀ diag(w) X`, accumulated row by row over stored entries; the
    /// grouped block is handled through per-group weight sums.
    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let p = self.ncols;
        let mut g = DMatrix::<f64>::zeros(p, p);
        {
            let data = g.as_mut_slice();
            for (i, &wi) in w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let range = self.row_ptr[i]..self.row_ptr[i + 1];
                let cols = &self.cols[range.clone()];
                let vals = &self.vals[range];
                for (a, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
                    let wa = wi * va;
                    // column-major: entry (r, c) lives at c * p + r; fill the lower triangle
                    let base = ca * p;
                    for (&cb, &vb) in cols[a..].iter().zip(&vals[a..]) {
                        data[base + cb] += wa * vb;
                    }
                }
            }
        }
        symmetrize_from_lower(&mut g);
        if let Some(gb) = &self.grouped {
            let ng = gb.values.nrows();
            let q = gb.values.ncols();
            let mut wsum = DVector::zeros(ng);
            // sparse-column × group weighted sums
            let mut cross = DMatrix::<f64>::zeros(p, ng);
            for (i, &wi) in w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let gi = gb.groups[i];
                wsum[gi] += wi;
                for (c, v) in self.sparse_row(i) {
                    cross[(c, gi)] += wi * v;
                }
            }
            let zwz = gb.values.tr_mul(&DMatrix::from_diagonal(&wsum)) * &gb.values;
            g.view_mut((gb.start, gb.start), (q, q)).copy_from(&zwz);
            let xz = cross * &gb.values;
            for c in 0..p {
                if c >= gb.start && c < gb.end() {
                    continue;
                }
                for j in 0..q {
                    let v = xz[(c, j)];
                    g[(c, gb.start + j)] = v;
                    g[(gb.start + j, c)] = v;
                }
            }
        }
        g
    }
}

fn symmetrize_from_lower(g: &mut DMatrix<f64>) {
    let p = g.nrows();
    for c in 0..p {
        for r in (c + 1)..p {
            g[(c, r)] = g[(r, c)];
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (eigenvectors permuted alongside).
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(a.nrows(), n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone()).ok_or_else(|| Error::numerical("matrix is not positive definite"))
}

pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log of the product of the eigenvalues above `rel_tol · max eigenvalue`,
/// together with the count of those eigenvalues.
pub fn logdet_plus(a: &DMatrix<f64>, rel_tol: f64) -> (f64, usize) {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return (0.0, 0);
    }
    eig.eigenvalues
        .iter()
        .filter(|&&l| l > rel_tol * max)
        .fold((0.0, 0), |(s, r), &l| (s + l.ln(), r + 1))
}

/// Orthonormal basis of the complement of `c` (a single constraint row of
/// length `k`), returned as a `k × (k−1)` matrix with orthonormal columns.
/// Built from the Householder reflection that maps `c` onto the first axis.
pub fn constraint_null_space(c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let k = c.len();
    let norm = c.norm();
    if k < 2 || norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid("constraint vector must be nonzero with length >= 2"));
    }
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vnorm2 = v.norm_squared();
    // H = I - 2 v vᵀ / (vᵀv); columns 1..k of H span the complement of c
    let mut z = DMatrix::zeros(k, k - 1);
    for col in 1..k {
        for row in 0..k {
            let delta = if row == col { 1.0 } else { 0.0 };
            z[(row, col - 1)] = delta - 2.0 * v[row] * v[col] / vnorm2;
        }
    }
    Ok(z)
}

/// Orthonormal basis (`k × (k−m)`) of the null space of the `m × k`
/// constraint matrix `c`, from successive Householder reflections.
pub fn constraints_null_space(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = c.ncols();
    let mut z = DMatrix::<f64>::identity(k, k);
    let scale = c.abs().max().max(1e-300);
    for r in 0..c.nrows() {
        let v = (c.row(r) * &z).transpose();
        if v.norm() <= 1e-10 * scale {
            return Err(Error::numerical("linearly dependent constraints"));
        }
        z = z * constraint_null_space(&v)?;
    }
    Ok(z)
}
