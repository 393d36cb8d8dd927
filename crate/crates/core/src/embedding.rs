//! Friendship-space coordinates: reciprocal connectedness distances, the
//! additive constant that makes them Euclidean, classical MDS and a
//! closed-form Procrustes alignment onto geographic coordinates.

use std::io::{Read, Write};

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_eigen_desc};
use crate::panel::DistrictRegistry;

/// Tolerance on the smallest eigenvalue of the centred Gram matrix, relative
/// to its largest absolute eigenvalue (floored at one).
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectednessMatrix {
    pub sci: DMatrix<f64>,
}

impl ConnectednessMatrix {
    pub fn new(sci: DMatrix<f64>) -> Result<Self> {
        if !sci.is_square() {
            return Err(Error::invalid("connectedness matrix must be square"));
        }
        let n = sci.nrows();
        for i in 0..n {
            for j in 0..n {
                if i != j && (sci[(i, j)] - sci[(j, i)]).abs() > 1e-12 * sci[(i, j)].abs().max(1.0) {
                    return Err(Error::invalid(format!("connectedness not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(ConnectednessMatrix { sci })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub d: DMatrix<f64>,
    pub additive_constant: f64,
}

impl DistanceMatrix {
    pub fn new(d: DMatrix<f64>) -> Result<Self> {
        if !d.is_square() {
            return Err(Error::invalid("distance matrix must be square"));
        }
        let n = d.nrows();
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(Error::invalid("distance matrix needs a zero diagonal"));
            }
            for j in 0..i {
                if (d[(i, j)] - d[(j, i)]).abs() > 1e-12 * d[(i, j)].abs().max(1.0) {
                    return Err(Error::invalid(format!("distance matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix {
            d,
            additive_constant: 0.0,
        })
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    /// Adds `c` to every off-diagonal entry.
    pub fn with_constant(&self, c: f64) -> DistanceMatrix {
        let mut d = self.d.clone();
        let n = d.nrows();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    d[(i, j)] += c;
                }
            }
        }
        DistanceMatrix {
            d,
            additive_constant: self.additive_constant + c,
        }
    }
}

/// `d_ij = 1 / x_ij` off the diagonal, zero on it.
pub fn connectedness_to_distance(c: &ConnectednessMatrix) -> Result<DistanceMatrix> {
    let n = c.sci.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let x = c.sci[(i, j)];
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::invalid(format!(
                    "connectedness between {i} and {j} must be positive, got {x}"
                )));
            }
            d[(i, j)] = 1.0 / x;
        }
    }
    DistanceMatrix::new(d)
}

/// `−½ J A J` for the centring matrix `J = I − 11ᵀ/n`.
fn double_center(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let row_means: Vec<f64> = (0..n).map(|i| a.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| a.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, n, |i, j| -0.5 * (a[(i, j)] - row_means[i] - col_means[j] + grand))
}

/// Centred Gram matrix of the squared distances.
pub fn centered_gram(d: &DistanceMatrix) -> DMatrix<f64> {
    double_center(&d.d.map(|v| v * v))
}

fn is_euclidean(d: &DistanceMatrix) -> bool {
    let g = centered_gram(d);
    let scale = g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    min_eigenvalue(&g) >= -PSD_TOL * scale
}

/// Largest real eigenvalue of the `2n × 2n` block matrix
/// `[[0, 2B(D²)], [−I, −4B(D)]]` (Cailliez).
fn cailliez_constant(d: &DistanceMatrix) -> f64 {
    let n = d.n();
    let b2 = double_center(&d.d.map(|v| v * v));
    let b1 = double_center(&d.d);
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, n), (n, n)).copy_from(&(b2 * 2.0));
    m.view_mut((n, 0), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
    m.view_mut((n, n), (n, n)).copy_from(&(b1 * -4.0));
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-9 * z.re.abs().max(1.0))
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest constant that, added to the off-diagonal distances, makes the
/// configuration Euclidean. Zero when it already is.
pub fn additive_constant(d: &DistanceMatrix) -> Result<f64> {
    if is_euclidean(d) {
        return Ok(0.0);
    }
    let candidate = cailliez_constant(d);
    if candidate.is_finite() && candidate > 0.0 && is_euclidean(&d.with_constant(candidate)) {
        return Ok(candidate);
    }
    // eigen route failed numerically: bracket and bisect on the PSD check
    let mut hi = if candidate.is_finite() && candidate > 0.0 {
        candidate
    } else {
        d.d.max().max(1e-12)
    };
    let mut lo = 0.0;
    let mut guard = 0;
    while !is_euclidean(&d.with_constant(hi)) {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::numerical("no additive constant makes distances Euclidean"));
        }
    }
    while hi - lo > 1e-13 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if is_euclidean(&d.with_constant(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCoordinates {
    /// `n × p`, column-centred.
    pub coords: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub stress: f64,
}

impl EmbeddingCoordinates {
    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.n())
            .map(|i| [self.coords[(i, 0)], self.coords[(i, 1.min(self.coords.ncols() - 1))]])
            .collect()
    }
}

/// Classical scaling: top-`p` eigenpairs of `−½ J D² J`. Each eigenvector's
/// largest-magnitude entry is made positive.
pub fn classical_mds(d: &DistanceMatrix, p: usize) -> Result<EmbeddingCoordinates> {
    let n = d.n();
    if p == 0 || p >= n {
        return Err(Error::invalid(format!("embedding dimension {p} invalid for {n} points")));
    }
    let b = centered_gram(d);
    let (vals, vecs) = sym_eigen_desc(&b);
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let positive = vals.iter().filter(|&&v| v > 1e-12 * scale).count();
    // a dimension with zero spread is allowed only when the configuration is genuinely lower-dimensional
    if positive == 0 {
        return Err(Error::numerical(
            "no positive eigenvalues; apply a larger additive constant",
        ));
    }
    if vals.iter().take(p).any(|&v| v < -PSD_TOL * scale) {
        return Err(Error::numerical(format!(
            "fewer than {p} non-negative eigenvalues; apply a larger additive constant"
        )));
    }
    let mut coords = DMatrix::zeros(n, p);
    let mut eigenvalues = Vec::with_capacity(p);
    for k in 0..p {
        let lambda = vals[k].max(0.0);
        let mut v = vecs.column(k).into_owned();
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |(bi, bv), (i, &x)| if x.abs() > bv + 1e-12 { (i, x.abs()) } else { (bi, bv) });
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        coords.set_column(k, &(v * lambda.sqrt()));
        eigenvalues.push(lambda);
    }
    for k in 0..p {
        let mean = coords.column(k).mean();
        coords.column_mut(k).add_scalar_mut(-mean);
    }
    let stress = raw_stress(&d.d, &coords);
    Ok(EmbeddingCoordinates {
        coords,
        eigenvalues,
        stress,
    })
}

/// `sqrt(Σ_{i≠j} (d_ij − ‖x_i − x_j‖)²)`.
pub fn raw_stress(d: &DMatrix<f64>, coords: &DMatrix<f64>) -> f64 {
    let n = d.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dist = (coords.row(i) - coords.row(j)).norm();
                s += (d[(i, j)] - dist).powi(2);
            }
        }
    }
    s.sqrt()
}

/// `x ↦ ρ Aᵀ x + b` with orthogonal `A` (reflections allowed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub dilation: f64,
    pub rotation: Matrix2<f64>,
    pub translation: Vector2<f64>,
    pub residual: f64,
}

impl SimilarityTransform {
    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        let v = self.rotation.transpose() * Vector2::new(x[0], x[1]) * self.dilation + self.translation;
        [v[0], v[1]]
    }

    pub fn residual_of(&self, source: &[[f64; 2]], target: &[[f64; 2]]) -> f64 {
        source
            .iter()
            .zip(target)
            .map(|(s, t)| {
                let y = self.apply(*s);
                (y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2)
            })
            .sum()
    }
}

/// Least-squares similarity transform of `source` onto `target`: rotation
/// from the SVD of the centred cross-covariance, dilation from the trace
/// ratio, translation matching the centroids.
pub fn procrustes_align(
    source: &[[f64; 2]],
    target: &[[f64; 2]],
) -> Result<(SimilarityTransform, Vec<[f64; 2]>)> {
    let n = source.len();
    if n != target.len() {
        return Err(Error::invalid("source and target sizes differ"));
    }
    if n < 3 {
        return Err(Error::invalid("Procrustes alignment needs at least three points"));
    }
    let centroid = |pts: &[[f64; 2]]| {
        let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        Vector2::new(s[0] / n as f64, s[1] / n as f64)
    };
    let xs = centroid(source);
    let ys = centroid(target);
    let mut cross = Matrix2::zeros();
    let mut ss_source = 0.0;
    for (s, t) in source.iter().zip(target) {
        let xc = Vector2::new(s[0], s[1]) - xs;
        let yc = Vector2::new(t[0], t[1]) - ys;
        cross += xc * yc.transpose();
        ss_source += xc.norm_squared();
    }
    if ss_source <= 1e-300 {
        return Err(Error::invalid("degenerate source configuration (all points identical)"));
    }
    let svd = cross.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    // Xcᵀ Yc = U Σ Vᵀ  ⇒  A = U Vᵀ maximises tr(Aᵀ Xcᵀ Yc)
    let rotation = u * v_t;
    let dilation = svd.singular_values.sum() / ss_source;
    let translation = ys - rotation.transpose() * xs * dilation;
    let mut transform = SimilarityTransform {
        dilation,
        rotation,
        translation,
        residual: 0.0,
    };
    let aligned: Vec<[f64; 2]> = source.iter().map(|p| transform.apply(*p)).collect();
    transform.residual = transform.residual_of(source, target);
    Ok((transform, aligned))
}

/// Output of the full connectedness → coordinates pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialEmbedding {
    pub additive_constant: f64,
    pub embedding: EmbeddingCoordinates,
    pub transform: SimilarityTransform,
    pub aligned: Vec<[f64; 2]>,
}

pub fn embed_connectedness(c: &ConnectednessMatrix, geographic: &[[f64; 2]], p: usize) -> Result<SocialEmbedding> {
    let d = connectedness_to_distance(c)?;
    let constant = additive_constant(&d)?;
    let corrected = d.with_constant(constant);
    let embedding = classical_mds(&corrected, p)?;
    let (transform, aligned) = procrustes_align(&embedding.points(), geographic)?;
    Ok(SocialEmbedding {
        additive_constant: constant,
        embedding,
        transform,
        aligned,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SciRow {
    src_district: String,
    dst_district: String,
    sci: f64,
}

/// Reads `src_district,dst_district,sci`; a pair given in one direction only
/// is mirrored.
pub fn parse_connectedness<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<ConnectednessMatrix> {
    let n = registry.len();
    let mut m = DMatrix::from_element(n, n, f64::NAN);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (k, row) in rdr.deserialize::<SciRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: k + 2,
            message: e.to_string(),
        })?;
        let i = registry
            .position(&row.src_district)
            .ok_or_else(|| Error::UnknownDistrict(row.src_district.clone()))?;
        let j = registry
            .position(&row.dst_district)
            .ok_or_else(|| Error::UnknownDistrict(row.dst_district.clone()))?;
        m[(i, j)] = row.sci;
    }
    let ids = registry.ids();
    for i in 0..n {
        m[(i, i)] = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            if m[(i, j)].is_nan() {
                m[(i, j)] = m[(j, i)];
            }
            if m[(i, j)].is_nan() {
                return Err(Error::invalid(format!(
                    "connectedness missing for pair ({}, {})",
                    ids[i], ids[j]
                )));
            }
        }
    }
    ConnectednessMatrix::new(m)
}

pub fn write_connectedness<W: Write>(writer: W, registry: &DistrictRegistry, c: &ConnectednessMatrix) -> Result<()> {
    let ids = registry.ids();
    let mut wtr = csv::Writer::from_writer(writer);
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            wtr.serialize(SciRow {
                src_district: ids[i].clone(),
                dst_district: ids[j].clone(),
                sci: c.sci[(i, j)],
            })?;
        }
    }
    wtr.flush().map_err(|e| Error::io("connectedness", e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CoordRow {
    district_id: String,
    dim1: f64,
    dim2: f64,
}

pub fn write_coordinates<W: Write>(writer: W, ids: &[String], points: &[[f64; 2]]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (id, p) in ids.iter().zip(points) {
        wtr.serialize(CoordRow {
            district_id: id.clone(),
            dim1: p[0],
            dim2: p[1],
        })?;
    }
    wtr.flush().map_err(|e| Error::io("coordinates", e))?;
    Ok(())
}

/// Reads `district_id,dim1,dim2` into registry order.
pub fn read_coordinates<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<Vec<[f64; 2]>> {
    let mut out = vec![[f64::NAN; 2]; registry.len()];
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (k, row) in rdr.deserialize::<CoordRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: k + 2,
            message: e.to_string(),
        })?;
        let i = registry
            .position(&row.district_id)
            .ok_or_else(|| Error::UnknownDistrict(row.district_id.clone()))?;
        out[i] = [row.dim1, row.dim2];
    }
    if let Some(i) = out.iter().position(|p| p[0].is_nan()) {
        return Err(Error::invalid(format!(
            "embedding coordinates missing for district '{}'",
            registry.districts()[i].district_id
        )));
    }
    Ok(out)
}
