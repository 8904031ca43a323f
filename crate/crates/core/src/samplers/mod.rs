//! Single-chain samplers: random-walk Metropolis–Hastings and HMC.
//!
//! A chain runs `burn_in + stride * n_samples` transitions and keeps every
//! `stride`-th state after burn-in. Failed or divergent transitions are
//! counted and treated as rejections; they never abort the chain.

mod diagnostics;
mod hmc;
mod mh;

use std::time::Instant;

use serde::Serialize;

pub use diagnostics::{autocorrelation, chain_diagnostics, effective_sample_size, ChainDiagnostics};
pub use hmc::{hmc_step, leapfrog, HmcParams, DIVERGENCE_THRESHOLD};
pub use mh::{mh_step, GaussianProposal};

use crate::error::{check_dim, Result};
use crate::posterior::Potential;
use crate::rng::RngStream;

/// Transition kernel of a chain.
#[derive(Debug, Clone)]
pub enum Mechanism {
    Gaussian(GaussianProposal),
    Hmc(HmcParams),
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub stride: usize,
    pub n_samples: usize,
    pub initial: Vec<f64>,
    pub rng: RngStream,
}

impl ChainConfig {
    pub fn total_steps(&self) -> usize {
        self.burn_in + self.stride * self.n_samples
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ChainResult {
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
    pub proposals_made: u64,
    pub proposals_accepted: u64,
    pub divergences: u64,
    pub failed_steps: u64,
    pub wall_time: f64,
    pub cpu_time: f64,
}

impl ChainResult {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals_made == 0 {
            0.0
        } else {
            self.proposals_accepted as f64 / self.proposals_made as f64
        }
    }
}

/// Accepts a move whose log-target change is `delta`, with probability `min(1, e^delta)`.
pub fn metropolis_accept(delta: f64, rng: &mut RngStream) -> bool {
    if delta.is_nan() {
        return false;
    }
    let u = rng.uniform();
    u < delta.exp()
}

/// Chain state with the potential (and, for HMC, gradient) cached.
pub(crate) struct State {
    pub x: Vec<f64>,
    pub u: f64,
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Outcome {
    pub accepted: bool,
    pub divergent: bool,
}

pub fn run_chain<P: Potential + ?Sized>(
    target: &P,
    cfg: ChainConfig,
    mechanism: &Mechanism,
) -> Result<ChainResult> {
    check_dim(target.dim(), cfg.initial.len())?;
    if cfg.stride == 0 {
        return Err(crate::Error::InvalidArgument("mixing stride must be >= 1".into()));
    }
    let wall = Instant::now();
    let cpu = thread_cpu_time();
    let ChainConfig { burn_in, stride, n_samples, initial, mut rng } = cfg;
    let mut state = match mechanism {
        Mechanism::Gaussian(_) => State { u: target.potential(&initial)?, x: initial, grad: None },
        Mechanism::Hmc(_) => {
            let (u, g) = target.potential_and_gradient(&initial)?;
            State { x: initial, u, grad: Some(g) }
        }
    };
    let mut out = ChainResult { samples: Vec::with_capacity(n_samples), ..Default::default() };
    for step in 0..burn_in + stride * n_samples {
        let res = match mechanism {
            Mechanism::Gaussian(q) => mh::transition(target, &mut state, q, &mut rng),
            Mechanism::Hmc(h) => hmc::transition(target, &mut state, h, &mut rng),
        };
        out.proposals_made += 1;
        match res {
            Ok(o) => {
                out.proposals_accepted += o.accepted as u64;
                out.divergences += o.divergent as u64;
            }
            Err(e) => {
                log::debug!("step {step} failed: {e}");
                out.failed_steps += 1;
            }
        }
        if step >= burn_in && (step - burn_in + 1) % stride == 0 {
            out.samples.push(state.x.clone());
        }
    }
    out.wall_time = wall.elapsed().as_secs_f64();
    out.cpu_time = thread_cpu_time() - cpu;
    Ok(out)
}

/// CPU time consumed by the calling thread, in seconds.
pub fn thread_cpu_time() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}
