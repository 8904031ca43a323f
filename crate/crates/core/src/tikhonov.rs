//! Tikhonov-regularised least squares and L-curve selection of `α`.
//!
//! Objective `T(x) = ‖H(x) − y‖²_{R⁻¹} + α xᵀCx`, gradient
//! `2[∂H(x)]ᵀR⁻¹(H(x) − y) + 2αCx`. The factor 2 is kept on both so they stay
//! consistent.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::ForwardOperator;
use crate::linalg::{cholesky, dot, norm, CholeskyFactor, SpdMatrix};

/// The matrix `C` of the penalty `xᵀCx`.
#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    Identity,
    Matrix(SpdMatrix),
    /// Five-point negative Laplacian with Neumann boundaries plus `shift · I`.
    Laplacian { rows: usize, cols: usize, shift: f64 },
}

impl Regularizer {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Regularizer::Identity => Ok(x.to_vec()),
            Regularizer::Matrix(m) => m.mul_vec(x),
            Regularizer::Laplacian { rows, cols, shift } => {
                check_dim(rows * cols, x.len())?;
                let mut out = vec![0.0; x.len()];
                for r in 0..*rows {
                    for c in 0..*cols {
                        let i = r * cols + c;
                        let mut acc = shift * x[i];
                        let mut nb = |j: usize| acc += x[i] - x[j];
                        if r > 0 {
                            nb(i - cols);
                        }
                        if r + 1 < *rows {
                            nb(i + cols);
                        }
                        if c > 0 {
                            nb(i - 1);
                        }
                        if c + 1 < *cols {
                            nb(i + 1);
                        }
                        out[i] = acc;
                    }
                }
                Ok(out)
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Regularizer::Identity => Ok(()),
            Regularizer::Matrix(m) => check_dim(dim, m.order()),
            Regularizer::Laplacian { rows, cols, shift } => {
                check_dim(dim, rows * cols)?;
                if *shift > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("Laplacian shift must be positive".into()))
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TikhonovProblem {
    operator: ForwardOperator,
    y: Vec<f64>,
    obs_factor: CholeskyFactor,
    regularizer: Regularizer,
    alpha: f64,
    /// Built on first direct solve and shared by every `with_alpha` copy.
    normal: Arc<OnceLock<NormalSystem>>,
}

/// Packed lower triangles of `JᵀR⁻¹J` and `C`, and `JᵀR⁻¹y`, for a linear `H`.
#[derive(Debug)]
struct NormalSystem {
    gram: Vec<f64>,
    penalty: Vec<f64>,
    rhs: Vec<f64>,
}

impl TikhonovProblem {
    pub fn new(
        operator: ForwardOperator,
        y: Vec<f64>,
        obs_cov: &SpdMatrix,
        regularizer: Regularizer,
        alpha: f64,
    ) -> Result<Self> {
        check_dim(operator.out_dim(), y.len())?;
        check_dim(y.len(), obs_cov.order())?;
        regularizer.validate(operator.in_dim())?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} must be finite and >= 0")));
        }
        Ok(Self {
            operator,
            y,
            obs_factor: cholesky(obs_cov)?,
            regularizer,
            alpha,
            normal: Arc::new(OnceLock::new()),
        })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} must be finite and >= 0")));
        }
        Ok(Self { alpha, ..self.clone() })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn r_inv(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.obs_factor.solve_upper(&self.obs_factor.solve_lower(v)?)
    }

    fn normal_system(&self) -> Result<&NormalSystem> {
        if let Some(s) = self.normal.get() {
            return Ok(s);
        }
        let n = self.dim();
        let zero = vec![0.0; n];
        let mut gram = Vec::with_capacity(n * (n + 1) / 2);
        let mut penalty = Vec::with_capacity(n * (n + 1) / 2);
        // row i of the lower triangle is column i of the symmetric matrix
        let mut e = vec![0.0; n];
        for i in 0..n {
            e[i] = 1.0;
            let col = self.operator.adjoint_jacobian_apply(&zero, &self.r_inv(&self.operator.apply(&e)?)?)?;
            gram.extend_from_slice(&col[..=i]);
            penalty.extend_from_slice(&self.regularizer.apply(&e)?[..=i]);
            e[i] = 0.0;
        }
        let rhs = self.operator.adjoint_jacobian_apply(&zero, &self.r_inv(&self.y)?)?;
        Ok(self.normal.get_or_init(|| NormalSystem { gram, penalty, rhs }))
    }

    /// Exact minimiser of the quadratic objective of a linear operator.
    fn solve_normal_equations(&self) -> Result<Vec<f64>> {
        let s = self.normal_system()?;
        let a: Vec<f64> = s.gram.iter().zip(&s.penalty).map(|(g, c)| g + self.alpha * c).collect();
        cholesky(&SpdMatrix::from_packed_lower(self.dim(), a))?.solve(&s.rhs)
    }

    pub fn dim(&self) -> usize {
        self.operator.in_dim()
    }

    /// `‖H(x) − y‖_{R⁻¹}`.
    pub fn residual_norm(&self, x: &[f64]) -> Result<f64> {
        let r = self.residual(x)?;
        Ok(norm(&self.obs_factor.solve_lower(&r)?))
    }

    /// `sqrt(xᵀCx)`.
    pub fn solution_norm(&self, x: &[f64]) -> Result<f64> {
        Ok(dot(x, &self.regularizer.apply(x)?).max(0.0).sqrt())
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.operator.apply(x)?.iter().zip(&self.y).map(|(h, y)| h - y).collect())
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        let r = self.residual(x)?;
        let w = self.obs_factor.solve_lower(&r)?;
        Ok(dot(&w, &w) + self.alpha * dot(x, &self.regularizer.apply(x)?))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.objective_and_gradient(x)?.1)
    }

    pub fn objective_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        let r = self.residual(x)?;
        let w = self.obs_factor.solve_lower(&r)?;
        let rinv = self.obs_factor.solve_upper(&w)?;
        let cx = self.regularizer.apply(x)?;
        let mut g = self.operator.adjoint_jacobian_apply(x, &rinv)?;
        for (gi, ci) in g.iter_mut().zip(&cx) {
            *gi = 2.0 * *gi + 2.0 * self.alpha * ci;
        }
        Ok((dot(&w, &w) + self.alpha * dot(x, &cx), g))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Stop when `‖∇T‖ ≤ rel_tol · max(1, ‖∇T(x0)‖)`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Linear operators up to this dimension are solved through dense
    /// normal equations, refined by conjugate gradients if needed.
    /// `0` always iterates.
    pub direct_max_dim: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-8, max_iter: 20_000, direct_max_dim: 2048 }
    }
}

#[derive(Debug, Clone)]
pub struct TikhonovSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the iteration cap or a failed line search stopped the solver;
    /// `x` is then the best iterate found.
    pub converged: bool,
}

/// Minimises the objective. Small linear problems start from the
/// normal-equations solution; the iteration is nonlinear conjugate gradients
/// (Polak–Ribière+) with an Armijo backtracking line search started from a
/// secant step estimate.
pub fn solve_tikhonov(prob: &TikhonovProblem, x0: &[f64], opts: &SolverOptions) -> Result<TikhonovSolution> {
    check_dim(prob.dim(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial point must be finite".into()));
    }
    let (f0, g0) = prob.objective_and_gradient(x0)?;
    let tol = opts.rel_tol * norm(&g0).max(1.0);
    if norm(&g0) > tol && prob.operator.is_linear() && prob.dim() <= opts.direct_max_dim {
        match prob.solve_normal_equations() {
            Ok(x) => {
                let (f, g) = prob.objective_and_gradient(&x)?;
                if f.is_finite() && f <= f0 {
                    return conjugate_gradients(prob, x, f, g, tol, opts.max_iter);
                }
            }
            Err(e) => log::debug!("normal equations failed, iterating: {e}"),
        }
    }
    conjugate_gradients(prob, x0.to_vec(), f0, g0, tol, opts.max_iter)
}

fn conjugate_gradients(
    prob: &TikhonovProblem,
    mut x: Vec<f64>,
    mut f: f64,
    mut g: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<TikhonovSolution> {
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = norm(&g) <= tol;
    while !converged && iterations < max_iter {
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        // secant curvature along d from a trial step
        let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
        let g_trial = prob.gradient(&trial)?;
        let curv = (dot(&g_trial, &d) - slope) / step;
        let mut t = if curv > 0.0 { -slope / curv } else { 2.0 * step };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (fn_, gn) = prob.objective_and_gradient(&xn)?;
            if fn_.is_finite() && fn_ <= f + 1e-4 * t * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if dot(&d, &g) == -dot(&g, &g) {
                break;
            }
            // retry along steepest descent
            d = g.iter().map(|v| -v).collect();
            continue;
        };
        let g_old = std::mem::replace(&mut g, gn);
        let gg_old = dot(&g_old, &g_old);
        let beta = (dot(&g, &g) - dot(&g, &g_old)) / gg_old;
        let beta = if beta.is_finite() { beta.max(0.0) } else { 0.0 };
        for (di, gi) in d.iter_mut().zip(&g) {
            *di = -gi + beta * *di;
        }
        x = xn;
        f = fn_;
        step = t;
        iterations += 1;
        converged = norm(&g) <= tol;
    }
    Ok(TikhonovSolution { grad_norm: norm(&g), x, objective: f, iterations, converged })
}

#[derive(Debug, Clone, Serialize)]
pub struct LCurvePoint {
    pub alpha: f64,
    pub residual_norm: f64,
    pub solution_norm: f64,
    /// Signed three-point curvature; `None` at the two ends.
    pub curvature: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LCurve {
    pub points: Vec<LCurvePoint>,
    pub alpha_star: f64,
    pub index: usize,
    /// Set when every curvature was within `1e-12` of zero; `alpha_star` is then the grid midpoint.
    pub degenerate: bool,
    #[serde(skip)]
    pub solution: Vec<f64>,
}

/// `n` values log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn menger_curvature(p: [(f64, f64); 3]) -> f64 {
    let [(x1, y1), (x2, y2), (x3, y3)] = p;
    let cross = (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1);
    let d12 = (x2 - x1).hypot(y2 - y1);
    let d23 = (x3 - x2).hypot(y3 - y2);
    let d13 = (x3 - x1).hypot(y3 - y1);
    let denom = d12 * d23 * d13;
    if denom > 0.0 {
        2.0 * cross / denom
    } else {
        0.0
    }
}

/// Solves the problem for every `α` (in parallel), traces
/// `(log ‖H(x_α) − y‖, log ‖x_α‖_C)` in increasing `α` and returns the `α`
/// of largest positive curvature, breaking ties toward larger `α`.
pub fn lcurve_select_alpha(
    template: &TikhonovProblem,
    alphas: &[f64],
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<LCurve> {
    if alphas.len() < 5 {
        return Err(Error::InvalidArgument(format!("L-curve needs >= 5 grid points, got {}", alphas.len())));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    let solved: Vec<Result<(TikhonovSolution, f64, f64)>> = alphas
        .par_iter()
        .map(|&a| {
            let p = template.with_alpha(a)?;
            let s = solve_tikhonov(&p, x0, opts)?;
            let rn = p.residual_norm(&s.x)?;
            let sn = p.solution_norm(&s.x)?;
            Ok((s, rn, sn))
        })
        .collect();
    let solved = solved.into_iter().collect::<Result<Vec<_>>>()?;
    let log = |v: f64| v.max(f64::MIN_POSITIVE).ln();
    let pts: Vec<(f64, f64)> = solved.iter().map(|(_, r, s)| (log(*r), log(*s))).collect();
    let n = pts.len();
    let mut points: Vec<LCurvePoint> = solved
        .iter()
        .zip(&alphas)
        .map(|((s, r, sn), &alpha)| LCurvePoint {
            alpha,
            residual_norm: *r,
            solution_norm: *sn,
            curvature: None,
            converged: s.converged,
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    let mut flat = true;
    for i in 1..n - 1 {
        let k = menger_curvature([pts[i - 1], pts[i], pts[i + 1]]);
        points[i].curvature = Some(k);
        if k.abs() > 1e-12 {
            flat = false;
        }
        if k > 0.0 && best.is_none_or(|(_, bk)| k >= bk) {
            best = Some((i, k));
        }
    }
    let (index, degenerate) = match best {
        Some((i, _)) if !flat => (i, false),
        _ => (n / 2, true),
    };
    if degenerate {
        log::warn!("L-curve is flat; falling back to the grid midpoint");
    }
    let solution = solved[index].0.x.clone();
    Ok(LCurve { alpha_star: alphas[index], index, degenerate, points, solution })
}

pub fn write_lcurve_csv(curve: &LCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "alpha,residual_norm,solution_norm,curvature")?;
    for p in &curve.points {
        let k = p.curvature.map(|k| k.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{}", p.alpha, p.residual_norm, p.solution_norm, k)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Boundary;
    use crate::rng::{sample_standard_normal, RngStream};

    fn two_by_two(alpha: f64) -> TikhonovProblem {
        TikhonovProblem::new(
            ForwardOperator::linear(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
            vec![1.0, 1.0],
            &SpdMatrix::identity(2),
            Regularizer::Identity,
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_two_by_two() {
        let s = solve_tikhonov(&two_by_two(1.0), &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert!(s.converged);
        assert!((s.x[0] - 0.5).abs() < 1e-6 && (s.x[1] - 0.4).abs() < 1e-6, "{:?}", s.x);
    }

    #[test]
    fn unregularised_identity_recovers_data() {
        let p = TikhonovProblem::new(
            ForwardOperator::identity(3),
            vec![1.0, -2.0, 0.5],
            &SpdMatrix::identity(3),
            Regularizer::Identity,
            0.0,
        )
        .unwrap();
        let s = solve_tikhonov(&p, &[0.0; 3], &SolverOptions::default()).unwrap();
        for (a, b) in s.x.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-8);
        }
        let again = solve_tikhonov(&p, &s.x, &SolverOptions::default()).unwrap();
        assert!(again.iterations <= 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8, 0);
        let inner = ForwardOperator::blur(3, 4, 3, 1.0, Boundary::Reflect).unwrap();
        for op in [inner.clone(), ForwardOperator::saturated(inner)] {
            let p = TikhonovProblem::new(
                op,
                sample_standard_normal(&mut rng, 12),
                &SpdMatrix::diagonal(vec![0.5; 12]).unwrap(),
                Regularizer::Laplacian { rows: 3, cols: 4, shift: 0.1 },
                0.3,
            )
            .unwrap();
            let x = sample_standard_normal(&mut rng, 12);
            let g = p.gradient(&x).unwrap();
            let h = 1e-6;
            for j in 0..12 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (p.objective(&xp).unwrap() - p.objective(&xm).unwrap()) / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn large_alpha_shrinks_to_zero() {
        let s = solve_tikhonov(&two_by_two(1e8), &[1.0, 1.0], &SolverOptions::default()).unwrap();
        assert!(norm(&s.x) < 1e-7);
    }

    #[test]
    fn lcurve_needs_five_points() {
        let p = two_by_two(1.0);
        assert!(lcurve_select_alpha(&p, &[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0], &SolverOptions::default()).is_err());
        let c = lcurve_select_alpha(&p, &[0.3; 5], &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.alpha_star, 0.3);
    }

    #[test]
    fn curvature_sign_marks_corner() {
        // down then right: the corner of an L
        assert!(menger_curvature([(0.0, 1.0), (0.0, 0.0), (1.0, 0.0)]) > 0.0);
        assert!(menger_curvature([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]) == 0.0);
    }

    #[test]
    fn grid_endpoints() {
        let g = log_grid(1e-6, 1e2, 30);
        assert_eq!(g.len(), 30);
        assert!((g[0] - 1e-6).abs() < 1e-20 && (g[29] - 1e2).abs() < 1e-10);
    }
}
