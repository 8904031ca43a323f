//! Parallel cluster sampling for Bayesian inverse problems.
//!
//! A prior ensemble is summarised by a Gaussian mixture fitted with EM, the
//! posterior `P(x | y) ∝ P(y | x) Σ τ_i N(μ_i, Σ_i)` is sampled by one Markov
//! chain per mixture component (random-walk Metropolis–Hastings or Hamiltonian
//! Monte Carlo), and the chains run on a fixed pool of worker threads. The
//! crate also carries a Tikhonov/L-curve baseline, an analytical cost model for
//! the multi-chain scheme, and end-to-end experiment drivers.
//!
//! Module map:
//! - [`linalg`] / [`rng`]: SPD matrices, Cholesky factors, reproducible streams.
//! - [`gmm`]: mixture density, sampling, EM and AIC model selection.
//! - [`forward`] / [`image`]: observation operators and grayscale image I/O.
//! - [`posterior`]: potential `J(x)` and its gradient.
//! - [`samplers`]: MH and HMC single-chain samplers with diagnostics.
//! - [`scheduler`]: multi-chain orchestration, cost model and speedup harness.
//! - [`tikhonov`]: regularised least-squares baseline.
//! - [`experiments`]: configuration, experiment drivers and artifact writing.

pub mod error;
pub mod experiments;
pub mod forward;
pub mod gmm;
pub mod image;
pub mod linalg;
pub mod posterior;
pub mod rng;
pub mod samplers;
pub mod scheduler;
pub mod tikhonov;

pub use error::{Error, Result};
