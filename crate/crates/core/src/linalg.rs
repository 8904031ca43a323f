//! Dense symmetric positive-definite algebra.
//!
//! [`SpdMatrix`] keeps the structure of a covariance (diagonal, spherical or
//! full) so that diagonal work stays `O(n)`. Full matrices are stored as a
//! packed lower triangle, row-major. [`CholeskyFactor`] mirrors the same three
//! layouts and provides the triangular solves used by every density and
//! gradient evaluation in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Pivots at or below `PIVOT_TOL * max(diag)` are rejected.
pub const PIVOT_TOL: f64 = 1e-13;

#[cfg(debug_assertions)]
thread_local! {
    static DENSE_OPS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

#[inline]
fn count_dense() {
    #[cfg(debug_assertions)]
    DENSE_OPS.with(|c| c.set(c.get() + 1));
}

/// Number of `O(n²)`-or-worse kernels run on this thread so far.
///
/// Only tracked when debug assertions are enabled; always 0 otherwise.
pub fn dense_op_count() -> u64 {
    #[cfg(debug_assertions)]
    {
        DENSE_OPS.with(|c| c.get())
    }
    #[cfg(not(debug_assertions))]
    {
        0
    }
}

/// Storage layout of an SPD matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixStructure {
    Diagonal,
    Spherical,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Diagonal(Vec<f64>),
    Spherical(f64),
    /// Packed lower triangle, `a[i*(i+1)/2 + j]` for `j <= i`.
    Full(Vec<f64>),
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Symmetric positive-definite matrix with a structure tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    order: usize,
    repr: Repr,
}

impl SpdMatrix {
    pub fn identity(order: usize) -> Self {
        Self::spherical(order, 1.0).expect("unit variance is valid")
    }

    pub fn spherical(order: usize, variance: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("matrix order must be >= 1".into()));
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: 0 });
        }
        Ok(Self { order, repr: Repr::Spherical(variance) })
    }

    pub fn diagonal(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("matrix order must be >= 1".into()));
        }
        if let Some(p) = entries.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NotPositiveDefinite { pivot: p });
        }
        Ok(Self { order: entries.len(), repr: Repr::Diagonal(entries) })
    }

    /// Builds a full matrix from dense rows. The input must be symmetric to
    /// within `1e-12` relative; the lower triangle is kept.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidArgument("matrix order must be >= 1".into()));
        }
        for r in rows {
            check_dim(n, r.len())?;
        }
        let mut lower = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                let (a, b) = (rows[i][j], rows[j][i]);
                if !a.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite entry ({i},{j})")));
                }
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "matrix is not symmetric at ({i},{j})"
                    )));
                }
                lower.push(a);
            }
        }
        Ok(Self { order: n, repr: Repr::Full(lower) })
    }

    /// Trusted packed lower triangle, row-major: `lower[i*(i+1)/2 + j]`, `j <= i`.
    pub(crate) fn from_packed_lower(order: usize, lower: Vec<f64>) -> Self {
        debug_assert_eq!(lower.len(), order * (order + 1) / 2);
        Self { order, repr: Repr::Full(lower) }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn structure(&self) -> MatrixStructure {
        match self.repr {
            Repr::Diagonal(_) => MatrixStructure::Diagonal,
            Repr::Spherical(_) => MatrixStructure::Spherical,
            Repr::Full(_) => MatrixStructure::Full,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match &self.repr {
            Repr::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            Repr::Spherical(v) => {
                if i == j {
                    *v
                } else {
                    0.0
                }
            }
            Repr::Full(a) => {
                let (r, c) = if i >= j { (i, j) } else { (j, i) };
                a[packed(r, c)]
            }
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.order).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        match &self.repr {
            Repr::Spherical(v) => *v * self.order as f64,
            _ => (0..self.order).map(|i| self.get(i, i)).sum(),
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.order)
            .map(|i| (0..self.order).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {c}")));
        }
        let repr = match &self.repr {
            Repr::Diagonal(d) => Repr::Diagonal(d.iter().map(|v| v * c).collect()),
            Repr::Spherical(v) => Repr::Spherical(v * c),
            Repr::Full(a) => Repr::Full(a.iter().map(|v| v * c).collect()),
        };
        Ok(Self { order: self.order, repr })
    }

    /// `A v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.order, v.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
            Repr::Spherical(s) => v.iter().map(|b| s * b).collect(),
            Repr::Full(a) => {
                count_dense();
                let n = self.order;
                let mut out = vec![0.0; n];
                for i in 0..n {
                    let row = &a[packed(i, 0)..packed(i, 0) + i + 1];
                    let mut acc = 0.0;
                    for (j, aij) in row.iter().enumerate() {
                        acc += aij * v[j];
                        if j < i {
                            out[j] += aij * v[i];
                        }
                    }
                    out[i] += acc;
                }
                out
            }
        })
    }

    /// `vᵀ A v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.order, v.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b * b).sum(),
            Repr::Spherical(s) => s * v.iter().map(|b| b * b).sum::<f64>(),
            Repr::Full(_) => dot(v, &self.mul_vec(v)?),
        })
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    order: usize,
    repr: Repr,
}

/// Factors an SPD matrix. Diagonal and spherical inputs take elementwise
/// square roots.
pub fn cholesky(a: &SpdMatrix) -> Result<CholeskyFactor> {
    let n = a.order;
    let repr = match &a.repr {
        Repr::Diagonal(d) => {
            let max = d.iter().cloned().fold(0.0, f64::max);
            if let Some(p) = d.iter().position(|v| *v <= PIVOT_TOL * max) {
                return Err(Error::NotPositiveDefinite { pivot: p });
            }
            Repr::Diagonal(d.iter().map(|v| v.sqrt()).collect())
        }
        Repr::Spherical(v) => Repr::Spherical(v.sqrt()),
        Repr::Full(src) => {
            count_dense();
            let max_diag = (0..n).map(|i| src[packed(i, i)]).fold(0.0, f64::max);
            let tol = PIVOT_TOL * max_diag;
            let mut l = src.clone();
            for j in 0..n {
                let mut d = l[packed(j, j)];
                for k in 0..j {
                    d -= l[packed(j, k)] * l[packed(j, k)];
                }
                if !(d > tol) {
                    return Err(Error::NotPositiveDefinite { pivot: j });
                }
                let djj = d.sqrt();
                l[packed(j, j)] = djj;
                for i in (j + 1)..n {
                    let mut s = l[packed(i, j)];
                    for k in 0..j {
                        s -= l[packed(i, k)] * l[packed(j, k)];
                    }
                    l[packed(i, j)] = s / djj;
                }
            }
            Repr::Full(l)
        }
    };
    Ok(CholeskyFactor { order: n, repr })
}

impl CholeskyFactor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            return 0.0;
        }
        match &self.repr {
            Repr::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            Repr::Spherical(s) => {
                if i == j {
                    *s
                } else {
                    0.0
                }
            }
            Repr::Full(l) => l[packed(i, j)],
        }
    }

    pub fn is_diagonal(&self) -> bool {
        !matches!(self.repr, Repr::Full(_))
    }

    /// `L z`.
    pub fn mul_vec(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.order, z.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(d) => d.iter().zip(z).map(|(a, b)| a * b).collect(),
            Repr::Spherical(s) => z.iter().map(|b| s * b).collect(),
            Repr::Full(l) => {
                count_dense();
                (0..self.order)
                    .map(|i| {
                        let row = &l[packed(i, 0)..=packed(i, i)];
                        row.iter().zip(z).map(|(a, b)| a * b).sum()
                    })
                    .collect()
            }
        })
    }

    /// `L⁻¹ v` by forward substitution.
    pub fn solve_lower(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.order, v.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(d) => v.iter().zip(d).map(|(a, b)| a / b).collect(),
            Repr::Spherical(s) => v.iter().map(|a| a / s).collect(),
            Repr::Full(l) => {
                count_dense();
                let n = self.order;
                let mut out = v.to_vec();
                for i in 0..n {
                    let row = &l[packed(i, 0)..packed(i, 0) + i];
                    let s: f64 = row.iter().zip(&out[..i]).map(|(a, b)| a * b).sum();
                    out[i] = (out[i] - s) / l[packed(i, i)];
                }
                out
            }
        })
    }

    /// `L⁻ᵀ v` by back substitution.
    pub fn solve_upper(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.order, v.len())?;
        Ok(match &self.repr {
            Repr::Diagonal(_) | Repr::Spherical(_) => self.solve_lower(v)?,
            Repr::Full(l) => {
                count_dense();
                let n = self.order;
                let mut out = v.to_vec();
                for i in (0..n).rev() {
                    out[i] /= l[packed(i, i)];
                    let xi = out[i];
                    for k in 0..i {
                        out[k] -= l[packed(i, k)] * xi;
                    }
                }
                out
            }
        })
    }

    /// `A⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.repr {
            Repr::Diagonal(d) => {
                check_dim(self.order, v.len())?;
                Ok(v.iter().zip(d).map(|(a, b)| a / (b * b)).collect())
            }
            Repr::Spherical(s) => {
                check_dim(self.order, v.len())?;
                Ok(v.iter().map(|a| a / (s * s)).collect())
            }
            Repr::Full(_) => self.solve_upper(&self.solve_lower(v)?),
        }
    }

    /// `vᵀ A⁻¹ v`.
    pub fn inv_quad_form(&self, v: &[f64]) -> Result<f64> {
        Ok(self.solve_lower(v)?.iter().map(|a| a * a).sum())
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        match &self.repr {
            Repr::Diagonal(d) => 2.0 * d.iter().map(|v| v.ln()).sum::<f64>(),
            Repr::Spherical(s) => 2.0 * self.order as f64 * s.ln(),
            Repr::Full(l) => 2.0 * (0..self.order).map(|i| l[packed(i, i)].ln()).sum::<f64>(),
        }
    }

    /// Diagonal of `A⁻¹`.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Diagonal(d) => d.iter().map(|v| 1.0 / (v * v)).collect(),
            Repr::Spherical(s) => vec![1.0 / (s * s); self.order],
            Repr::Full(_) => {
                // (A⁻¹)_ii = ‖L⁻¹ e_i‖²
                let n = self.order;
                (0..n)
                    .map(|i| {
                        let mut e = vec![0.0; n];
                        e[i] = 1.0;
                        self.solve_lower(&e).expect("order checked").iter().map(|a| a * a).sum()
                    })
                    .collect()
            }
        }
    }
}

/// `(c - d)ᵀ M (c - d)`.
pub fn weighted_norm_sq(c: &[f64], d: &[f64], m: &SpdMatrix) -> Result<f64> {
    check_dim(c.len(), d.len())?;
    check_dim(m.order(), c.len())?;
    let diff: Vec<f64> = c.iter().zip(d).map(|(a, b)| a - b).collect();
    Ok(m.quad_form(&diff)?.max(0.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigen-decomposition of a dense symmetric matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues and the row-major matrix whose columns are eigenvectors.
pub(crate) fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    count_dense();
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

/// Raises every eigenvalue of a dense symmetric matrix to at least `floor`.
pub(crate) fn clip_eigenvalues(a: &[Vec<f64>], floor: f64) -> Vec<Vec<f64>> {
    let n = a.len();
    let (vals, vecs) = symmetric_eigen(a);
    if vals.iter().all(|v| *v >= floor) {
        return a.to_vec();
    }
    let clipped: Vec<f64> = vals.iter().map(|v| v.max(floor)).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..n).map(|k| vecs[i][k] * clipped[k] * vecs[j][k]).sum();
            out[i][j] = s;
            out[j][i] = s;
        }
    }
    out
}
