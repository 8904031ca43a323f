use super::{metropolis_accept, Outcome, State};
use crate::error::{check_dim, Result};
use crate::linalg::{cholesky, CholeskyFactor, SpdMatrix};
use crate::posterior::Potential;
use crate::rng::{sample_mvn_factored, RngStream};

/// Symmetric random-walk proposal `x' = x + N(0, Σ_q)`.
#[derive(Debug, Clone)]
pub struct GaussianProposal {
    cov: SpdMatrix,
    factor: CholeskyFactor,
}

impl GaussianProposal {
    pub fn new(cov: SpdMatrix) -> Result<Self> {
        let factor = cholesky(&cov)?;
        Ok(Self { cov, factor })
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    fn propose(&self, x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        sample_mvn_factored(rng, x, &self.factor)
    }
}

/// One Metropolis–Hastings transition. The proposal is symmetric, so only
/// the target ratio enters the acceptance probability.
pub fn mh_step<P: Potential + ?Sized>(
    target: &P,
    x: &[f64],
    proposal: &GaussianProposal,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, bool)> {
    check_dim(target.dim(), x.len())?;
    let mut state = State { x: x.to_vec(), u: target.potential(x)?, grad: None };
    let o = transition(target, &mut state, proposal, rng)?;
    Ok((state.x, o.accepted))
}

pub(crate) fn transition<P: Potential + ?Sized>(
    target: &P,
    state: &mut State,
    proposal: &GaussianProposal,
    rng: &mut RngStream,
) -> Result<Outcome> {
    let candidate = proposal.propose(&state.x, rng)?;
    let u_new = target.potential(&candidate)?;
    let accepted = u_new.is_finite() && metropolis_accept(state.u - u_new, rng);
    if accepted {
        state.x = candidate;
        state.u = u_new;
    }
    Ok(Outcome { accepted, divergent: false })
}
