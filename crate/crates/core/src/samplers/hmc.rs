use super::{metropolis_accept, Outcome, State};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky, CholeskyFactor, SpdMatrix};
use crate::posterior::Potential;
use crate::rng::{sample_mvn_factored, RngStream};

/// Trajectories whose energy error exceeds this are counted as divergent and rejected.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone)]
pub struct HmcParams {
    mass: SpdMatrix,
    mass_factor: CholeskyFactor,
    step_size: f64,
    steps: usize,
}

impl HmcParams {
    pub fn new(mass: SpdMatrix, step_size: f64, steps: usize) -> Result<Self> {
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step size {step_size} must be positive")));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("trajectory needs at least one step".into()));
        }
        let mass_factor = cholesky(&mass)?;
        Ok(Self { mass, mass_factor, step_size, steps })
    }

    pub fn mass(&self) -> &SpdMatrix {
        &self.mass
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn kinetic(&self, p: &[f64]) -> Result<f64> {
        Ok(0.5 * self.mass_factor.inv_quad_form(p)?)
    }
}

/// Integrates `steps` leapfrog steps of size `h` for `H = ½pᵀM⁻¹p + U(x)`.
/// `grad` is `∇U(x)` at the starting point. Returns `(x, p, U(x), ∇U(x))` at the end.
pub fn leapfrog<P: Potential + ?Sized>(
    target: &P,
    x: &[f64],
    p: &[f64],
    grad: &[f64],
    mass: &CholeskyFactor,
    h: f64,
    steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
    check_dim(target.dim(), x.len())?;
    check_dim(x.len(), p.len())?;
    let mut x = x.to_vec();
    let mut p = p.to_vec();
    let mut g = grad.to_vec();
    let mut u = f64::NAN;
    for (pi, gi) in p.iter_mut().zip(&g) {
        *pi -= 0.5 * h * gi;
    }
    for i in 0..steps {
        let v = mass.solve(&p)?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += h * vi;
        }
        (u, g) = target.potential_and_gradient(&x)?;
        let scale = if i + 1 == steps { 0.5 * h } else { h };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= scale * gi;
        }
    }
    Ok((x, p, u, g))
}

/// One HMC transition from `x`.
pub fn hmc_step<P: Potential + ?Sized>(
    target: &P,
    x: &[f64],
    params: &HmcParams,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, bool)> {
    check_dim(target.dim(), x.len())?;
    let (u, g) = target.potential_and_gradient(x)?;
    let mut state = State { x: x.to_vec(), u, grad: Some(g) };
    let o = transition(target, &mut state, params, rng)?;
    Ok((state.x, o.accepted))
}

pub(crate) fn transition<P: Potential + ?Sized>(
    target: &P,
    state: &mut State,
    params: &HmcParams,
    rng: &mut RngStream,
) -> Result<Outcome> {
    let zero = vec![0.0; state.x.len()];
    let p0 = sample_mvn_factored(rng, &zero, &params.mass_factor)?;
    let grad = state.grad.as_ref().expect("HMC state carries a gradient");
    let h0 = state.u + params.kinetic(&p0)?;
    let (x, p, u, g) =
        leapfrog(target, &state.x, &p0, grad, &params.mass_factor, params.step_size, params.steps)?;
    let h1 = u + params.kinetic(&p)?;
    let delta = h1 - h0;
    if !delta.is_finite() || delta.abs() > DIVERGENCE_THRESHOLD {
        // draw anyway so the stream advances identically either way
        let _ = rng.uniform();
        return Ok(Outcome { accepted: false, divergent: true });
    }
    let accepted = metropolis_accept(-delta, rng);
    if accepted {
        state.x = x;
        state.u = u;
        state.grad = Some(g);
    }
    Ok(Outcome { accepted, divergent: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl Potential for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn potential(&self, x: &[f64]) -> Result<f64> {
            Ok(0.5 * x[0] * x[0])
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x[0]])
        }
    }

    #[test]
    fn single_leapfrog_step_matches_hand_algebra() {
        let m = cholesky(&SpdMatrix::identity(1)).unwrap();
        for h in [0.1, 0.25, 0.7] {
            let (x, p, _, _) = leapfrog(&Quadratic, &[1.0], &[0.0], &[1.0], &m, h, 1).unwrap();
            assert!((x[0] - (1.0 - h * h / 2.0)).abs() < 1e-15);
            assert!((p[0] - (-h + h.powi(3) / 4.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn trajectory_is_reversible() {
        let m = cholesky(&SpdMatrix::diagonal(vec![2.0]).unwrap()).unwrap();
        let (x, p, _, g) = leapfrog(&Quadratic, &[0.3], &[1.1], &[0.3], &m, 0.05, 40).unwrap();
        let (xb, pb, _, _) = leapfrog(&Quadratic, &x, &[-p[0]], &g, &m, 0.05, 40).unwrap();
        assert!((xb[0] - 0.3).abs() < 1e-10);
        assert!((pb[0] + 1.1).abs() < 1e-10);
    }

    #[test]
    fn tiny_steps_always_accept() {
        let params = HmcParams::new(SpdMatrix::identity(1), 1e-4, 1).unwrap();
        let mut rng = RngStream::new(3, 0);
        let mut x = vec![0.4];
        for _ in 0..500 {
            let (next, acc) = hmc_step(&Quadratic, &x, &params, &mut rng).unwrap();
            assert!(acc);
            x = next;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(HmcParams::new(SpdMatrix::identity(1), 0.0, 3).is_err());
        assert!(HmcParams::new(SpdMatrix::identity(1), 0.1, 0).is_err());
    }
}
