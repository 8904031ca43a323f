//! Observation operators `H` and the action of their Jacobian adjoint.
//!
//! Images are stored row-major: pixel `(r, c)` lives at index `r * cols + c`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Half-sample symmetric mirroring: `x[-1] = x[0]`, `x[n] = x[n-1]`.
    #[default]
    Reflect,
    Periodic,
}

impl Boundary {
    fn map(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Boundary::Periodic => i.rem_euclid(n) as usize,
            Boundary::Reflect => {
                let m = i.rem_euclid(2 * n);
                (if m < n { m } else { 2 * n - 1 - m }) as usize
            }
        }
    }
}

/// Separable Gaussian blur on a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlur {
    rows: usize,
    cols: usize,
    width: usize,
    sigma: f64,
    boundary: Boundary,
    kernel: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(rows: usize, cols: usize, width: usize, sigma: f64, boundary: Boundary) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("image grid must be non-empty".into()));
        }
        if width % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel width {width} must be odd")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("kernel sigma {sigma} must be positive")));
        }
        let r = (width / 2) as f64;
        let raw: Vec<f64> =
            (0..width).map(|k| (-0.5 * ((k as f64 - r) / sigma).powi(2)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let kernel = raw.iter().map(|v| v / total).collect();
        Ok(Self { rows, cols, width, sigma, boundary, kernel })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Normalised 1D kernel; the 2D kernel is its outer product.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// The same blur restricted to a single image row.
    pub fn row_operator(&self) -> Self {
        Self { rows: 1, ..self.clone() }
    }

    // One pass along rows (`along_cols == false`) or columns.
    fn pass(&self, x: &[f64], along_cols: bool, adjoint: bool) -> Vec<f64> {
        let (n, lines, stride, step) = if along_cols {
            (self.rows, self.cols, 1, self.cols)
        } else {
            (self.cols, self.rows, self.cols, 1)
        };
        let r = (self.width / 2) as isize;
        let mut out = vec![0.0; x.len()];
        for line in 0..lines {
            let base = line * stride;
            for i in 0..n {
                for (k, w) in self.kernel.iter().enumerate() {
                    let j = self.boundary.map(i as isize + k as isize - r, n);
                    if adjoint {
                        out[base + j * step] += w * x[base + i * step];
                    } else {
                        out[base + i * step] += w * x[base + j * step];
                    }
                }
            }
        }
        out
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(x, false, false), true, false)
    }

    fn adjoint(&self, v: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(v, true, true), false, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOperator {
    Identity { dim: usize },
    /// Dense `out_dim × in_dim` matrix, row-major.
    Linear { out_dim: usize, in_dim: usize, entries: Vec<f64> },
    GaussianBlur(GaussianBlur),
    /// Pointwise `s(z) = z / (1 + |z|)` applied to the inner operator's output.
    Saturated(Box<ForwardOperator>),
}

impl ForwardOperator {
    pub fn identity(dim: usize) -> Self {
        ForwardOperator::Identity { dim }
    }

    pub fn linear(rows: &[Vec<f64>]) -> Result<Self> {
        let out_dim = rows.len();
        let in_dim = rows.first().map(Vec::len).unwrap_or(0);
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidArgument("linear operator must be non-empty".into()));
        }
        if out_dim > in_dim {
            return Err(Error::InvalidArgument(format!(
                "observation dimension {out_dim} exceeds state dimension {in_dim}"
            )));
        }
        let mut entries = Vec::with_capacity(out_dim * in_dim);
        for r in rows {
            check_dim(in_dim, r.len())?;
            entries.extend_from_slice(r);
        }
        Ok(ForwardOperator::Linear { out_dim, in_dim, entries })
    }

    pub fn blur(rows: usize, cols: usize, width: usize, sigma: f64, boundary: Boundary) -> Result<Self> {
        Ok(ForwardOperator::GaussianBlur(GaussianBlur::new(rows, cols, width, sigma, boundary)?))
    }

    pub fn saturated(inner: ForwardOperator) -> Self {
        ForwardOperator::Saturated(Box::new(inner))
    }

    pub fn in_dim(&self) -> usize {
        match self {
            ForwardOperator::Identity { dim } => *dim,
            ForwardOperator::Linear { in_dim, .. } => *in_dim,
            ForwardOperator::GaussianBlur(b) => b.rows * b.cols,
            ForwardOperator::Saturated(inner) => inner.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ForwardOperator::Linear { out_dim, .. } => *out_dim,
            ForwardOperator::Saturated(inner) => inner.out_dim(),
            _ => self.in_dim(),
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, ForwardOperator::Saturated(_))
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.in_dim(), x.len())?;
        Ok(match self {
            ForwardOperator::Identity { .. } => x.to_vec(),
            ForwardOperator::Linear { in_dim, entries, .. } => {
                entries.chunks(*in_dim).map(|row| crate::linalg::dot(row, x)).collect()
            }
            ForwardOperator::GaussianBlur(b) => b.apply(x),
            ForwardOperator::Saturated(inner) => {
                inner.apply(x)?.into_iter().map(|z| z / (1.0 + z.abs())).collect()
            }
        })
    }

    /// `[∂H(x)]ᵀ v`.
    pub fn adjoint_jacobian_apply(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.in_dim(), x.len())?;
        check_dim(self.out_dim(), v.len())?;
        Ok(match self {
            ForwardOperator::Identity { .. } => v.to_vec(),
            ForwardOperator::Linear { in_dim, entries, .. } => {
                let mut out = vec![0.0; *in_dim];
                for (row, vi) in entries.chunks(*in_dim).zip(v) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * vi;
                    }
                }
                out
            }
            ForwardOperator::GaussianBlur(b) => b.adjoint(v),
            ForwardOperator::Saturated(inner) => {
                let z = inner.apply(x)?;
                let scaled: Vec<f64> =
                    z.iter().zip(v).map(|(z, v)| v / (1.0 + z.abs()).powi(2)).collect();
                inner.adjoint_jacobian_apply(x, &scaled)?
            }
        })
    }

    /// Dense Jacobian at `x`, built row by row from the adjoint action.
    /// Diagnostic only: costs `out_dim` adjoint applications.
    pub fn jacobian_dense(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let m = self.out_dim();
        let mut e = vec![0.0; m];
        (0..m)
            .map(|i| {
                e[i] = 1.0;
                let row = self.adjoint_jacobian_apply(x, &e);
                e[i] = 0.0;
                row
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToeplitzReport {
    pub is_toeplitz: bool,
    /// Largest `|i - j|` with a nonzero entry among the checked rows.
    pub bandwidth: usize,
}

/// Materialises the Jacobian of a 1D operator and checks that its diagonals
/// are constant on rows whose stencil does not touch the boundary.
pub fn toeplitz_check(op: &ForwardOperator) -> Result<ToeplitzReport> {
    let n = op.in_dim();
    let margin = match op {
        ForwardOperator::GaussianBlur(b) => b.width / 2,
        _ => 0,
    };
    let jac = op.jacobian_dense(&vec![0.0; n])?;
    let interior: Vec<usize> = (margin..jac.len().saturating_sub(margin)).collect();
    let mut bandwidth = 0;
    let mut diagonals: std::collections::BTreeMap<isize, f64> = Default::default();
    let mut is_toeplitz = true;
    for &i in &interior {
        for (j, &a) in jac[i].iter().enumerate() {
            let off = j as isize - i as isize;
            if a != 0.0 {
                bandwidth = bandwidth.max(off.unsigned_abs());
            }
            let first = *diagonals.entry(off).or_insert(a);
            if (first - a).abs() > 1e-14 {
                is_toeplitz = false;
            }
        }
    }
    Ok(ToeplitzReport { is_toeplitz, bandwidth })
}
