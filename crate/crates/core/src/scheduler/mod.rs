//! Multi-chain sampling: one chain per prior mixture component, run on a
//! fixed pool of worker threads and pooled with importance weights.
//!
//! Chain `i` always draws from stream id `i` of the run seed, so the pooled
//! ensemble does not depend on the worker count or the assignment.

mod bench;
mod cost;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bench::{benchmark_speedup, write_benchmark_csv, BenchmarkRow, BenchmarkTable};
pub use cost::{predict_cost, CostModelInput, CostReport, GmmRegime, ProposalRegime};

use crate::error::{Error, Result};
use crate::gmm::{softmax, Ensemble, GaussianMixture};
use crate::linalg::SpdMatrix;
use crate::posterior::{Potential, PosteriorModel};
use crate::rng::RngStream;
use crate::samplers::{run_chain, ChainConfig, ChainResult, GaussianProposal, HmcParams, Mechanism};

/// Per-component sample budgets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Budgets {
    pub counts: Vec<usize>,
    /// Normalised `τ_i · L(μ_i)`.
    pub importance: Vec<f64>,
    /// Set when `N_ens < n_c`, so some components receive no samples.
    pub infeasible: bool,
}

/// Splits `n_ens` samples across components in proportion to
/// `τ_i · L(μ_i)` by largest-remainder rounding. When `n_ens >= n_c`
/// every component gets at least one sample.
pub fn allocate_budgets(model: &PosteriorModel, n_ens: usize) -> Result<Budgets> {
    if n_ens == 0 {
        return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
    }
    let prior = model.prior();
    let log_scores = (0..prior.n_components())
        .map(|i| Ok(prior.weights()[i].ln() + model.log_likelihood(prior.mean(i))?))
        .collect::<Result<Vec<_>>>()?;
    let importance = softmax(&log_scores);
    let n_c = importance.len();
    let infeasible = n_ens < n_c;
    let mut forced = vec![false; n_c];
    let counts = loop {
        let n_forced = forced.iter().filter(|f| **f).count();
        let free: Vec<usize> = (0..n_c).filter(|&i| !forced[i]).collect();
        let mass: f64 = free.iter().map(|&i| importance[i]).sum();
        let mut counts = vec![0usize; n_c];
        for i in 0..n_c {
            if forced[i] {
                counts[i] = 1;
            }
        }
        let share = largest_remainder(
            &free.iter().map(|&i| importance[i] / mass).collect::<Vec<_>>(),
            n_ens - n_forced,
        );
        for (k, &i) in free.iter().enumerate() {
            counts[i] = share[k];
        }
        let zeros: Vec<usize> = free.iter().copied().filter(|&i| counts[i] == 0).collect();
        if infeasible || zeros.is_empty() {
            break counts;
        }
        for i in zeros {
            forced[i] = true;
        }
    };
    Ok(Budgets { counts, importance, infeasible })
}

fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|v| v * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainPlan {
    pub component: usize,
    pub budget: usize,
    pub initial: Vec<f64>,
    pub stream_id: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchedulerPlan {
    pub chains: Vec<ChainPlan>,
    pub workers: usize,
    /// Worker index of each chain.
    pub assignment: Vec<usize>,
    pub importance: Vec<f64>,
}

impl SchedulerPlan {
    /// Chain `i` starts at `μ_i`. Assignment is round-robin by chain index,
    /// or longest-budget-first onto the least loaded worker when `balance` is set.
    pub fn new(prior: &GaussianMixture, budgets: &Budgets, workers: usize, balance: bool) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidArgument("worker count must be >= 1".into()));
        }
        let n_c = prior.n_components();
        if budgets.counts.len() != n_c {
            return Err(Error::DimensionMismatch { expected: n_c, found: budgets.counts.len() });
        }
        let chains: Vec<ChainPlan> = (0..n_c)
            .map(|i| ChainPlan {
                component: i,
                budget: budgets.counts[i],
                initial: prior.mean(i).to_vec(),
                stream_id: i as u64,
            })
            .collect();
        let assignment = if balance {
            let mut order: Vec<usize> = (0..n_c).collect();
            order.sort_by(|&a, &b| chains[b].budget.cmp(&chains[a].budget).then(a.cmp(&b)));
            let mut load = vec![0usize; workers];
            let mut assignment = vec![0; n_c];
            for i in order {
                let w = (0..workers).min_by_key(|&w| (load[w], w)).expect("workers >= 1");
                assignment[i] = w;
                load[w] += chains[i].budget;
            }
            assignment
        } else {
            (0..n_c).map(|i| i % workers).collect()
        };
        Ok(Self { chains, workers, assignment, importance: budgets.importance.clone() })
    }

    pub fn total_budget(&self) -> usize {
        self.chains.iter().map(|c| c.budget).sum()
    }
}

/// How each chain derives its transition kernel from its mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MechanismSpec {
    /// Random walk with covariance `scale / N_var · Σ_i`.
    Gaussian { scale: f64 },
    /// HMC with mass `diag(Σ_i)⁻¹`, `steps` leapfrog steps of size `trajectory_length / steps`.
    Hmc { steps: usize, trajectory_length: f64 },
}

impl Default for MechanismSpec {
    fn default() -> Self {
        MechanismSpec::Gaussian { scale: 2.38 * 2.38 }
    }
}

impl MechanismSpec {
    /// Kernel tuned to a covariance (a mixture component or an ensemble estimate).
    pub fn build(&self, cov: &SpdMatrix) -> Result<Mechanism> {
        match *self {
            MechanismSpec::Gaussian { scale } => {
                let q = cov.scaled(scale / cov.order() as f64)?;
                Ok(Mechanism::Gaussian(GaussianProposal::new(q)?))
            }
            MechanismSpec::Hmc { steps, trajectory_length } => {
                let mass = SpdMatrix::diagonal(cov.diag().iter().map(|v| 1.0 / v).collect())?;
                let h = trajectory_length / steps.max(1) as f64;
                Ok(Mechanism::Hmc(HmcParams::new(mass, h, steps)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub burn_in: usize,
    pub stride: usize,
    pub seed: u64,
    /// Attach `τ_i L(μ_i) / n_i` importance weights; uniform weights otherwise.
    pub weighted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainRecord {
    pub component: usize,
    pub budget: usize,
    pub worker: usize,
    pub result: Option<ChainResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct McResult {
    pub ensemble: Ensemble,
    /// Component index of each pooled sample.
    pub labels: Vec<usize>,
    pub chains: Vec<ChainRecord>,
    pub aggregate_acceptance: f64,
    pub wall_time: f64,
}

/// Runs one chain per component with a positive budget on `plan.workers`
/// threads and gathers the samples in chain order.
pub fn run_mc_mcmc(
    model: &PosteriorModel,
    plan: &SchedulerPlan,
    mechanism: &MechanismSpec,
    opts: &RunOptions,
) -> Result<McResult> {
    let prior = model.prior();
    if plan.chains.len() != prior.n_components() {
        return Err(Error::DimensionMismatch { expected: prior.n_components(), found: plan.chains.len() });
    }
    let kernels = plan
        .chains
        .iter()
        .map(|c| mechanism.build(prior.covariance(c.component)))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut slots: Vec<Option<std::result::Result<ChainResult, String>>> = vec![None; plan.chains.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..plan.workers)
            .map(|w| {
                let kernels = &kernels;
                scope.spawn(move || {
                    let mut done = Vec::new();
                    for (i, chain) in plan.chains.iter().enumerate() {
                        if plan.assignment[i] != w || chain.budget == 0 {
                            continue;
                        }
                        done.push((i, run_one(model, chain, &kernels[i], opts)));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker loop catches chain panics") {
                slots[i] = Some(r);
            }
        }
    });
    let wall_time = start.elapsed().as_secs_f64();

    let mut members = Vec::with_capacity(plan.total_budget());
    let mut raw_weights = Vec::with_capacity(plan.total_budget());
    let mut labels = Vec::with_capacity(plan.total_budget());
    let mut records = Vec::with_capacity(plan.chains.len());
    let (mut made, mut accepted) = (0u64, 0u64);
    for (i, (chain, slot)) in plan.chains.iter().zip(slots).enumerate() {
        let mut rec = ChainRecord {
            component: chain.component,
            budget: chain.budget,
            worker: plan.assignment[i],
            result: None,
            error: None,
        };
        match slot {
            None => {}
            Some(Err(e)) => {
                log::warn!("chain {i} failed: {e}");
                rec.error = Some(e);
            }
            Some(Ok(mut r)) => {
                made += r.proposals_made;
                accepted += r.proposals_accepted;
                let n = r.samples.len();
                let w = if opts.weighted { plan.importance[chain.component] / n as f64 } else { 1.0 };
                for s in std::mem::take(&mut r.samples) {
                    members.push(s);
                    raw_weights.push(w);
                    labels.push(chain.component);
                }
                rec.result = Some(r);
            }
        }
        records.push(rec);
    }
    if members.is_empty() {
        return Err(Error::Numerical("no chain produced samples".into()));
    }
    let total: f64 = raw_weights.iter().sum();
    let weights: Vec<f64> = raw_weights.iter().map(|w| w / total).collect();
    let ensemble = Ensemble::with_weights(members, weights)?;
    let aggregate_acceptance = if made == 0 { 0.0 } else { accepted as f64 / made as f64 };
    Ok(McResult { ensemble, labels, chains: records, aggregate_acceptance, wall_time })
}

fn run_one<P: Potential>(
    target: &P,
    chain: &ChainPlan,
    kernel: &Mechanism,
    opts: &RunOptions,
) -> std::result::Result<ChainResult, String> {
    let cfg = ChainConfig {
        burn_in: opts.burn_in,
        stride: opts.stride,
        n_samples: chain.budget,
        initial: chain.initial.clone(),
        rng: RngStream::new(opts.seed, chain.stream_id),
    };
    match catch_unwind(AssertUnwindSafe(|| run_chain(target, cfg, kernel))) {
        Ok(Ok(r)) => Ok(r),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "chain panicked".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ForwardOperator;

    fn model(triples: &[(f64, f64, f64)], y: f64) -> PosteriorModel {
        PosteriorModel::new(
            GaussianMixture::univariate(triples).unwrap(),
            ForwardOperator::identity(1),
            vec![y],
            SpdMatrix::diagonal(vec![2.2]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_budgets_split_evenly() {
        // means placed symmetrically about y so all likelihoods agree
        let m = model(&[(0.25, -1.0, 1.0), (0.25, 1.0, 1.0), (0.25, -1.0, 2.0), (0.25, 1.0, 2.0)], 0.0);
        assert_eq!(allocate_budgets(&m, 100).unwrap().counts, vec![25; 4]);
    }

    #[test]
    fn proportional_budgets() {
        let m = model(&[(0.9, -1.0, 1.0), (0.1, 1.0, 1.0)], 0.0);
        assert_eq!(allocate_budgets(&m, 10).unwrap().counts, vec![9, 1]);
    }

    #[test]
    fn minimum_one_repair() {
        let m = model(&[(0.998, 0.0, 1.0), (0.001, 1.0, 1.0), (0.001, -1.0, 1.0)], 0.0);
        let b = allocate_budgets(&m, 10).unwrap();
        assert_eq!(b.counts, vec![8, 1, 1]);
        let b = allocate_budgets(&m, 2).unwrap();
        assert!(b.infeasible);
        assert_eq!(b.counts.iter().sum::<usize>(), 2);
    }

    #[test]
    fn round_robin_is_balanced() {
        let prior = GaussianMixture::univariate(&[(0.2, 0.0, 1.0); 5]).unwrap();
        let b = Budgets { counts: vec![3; 5], importance: vec![0.2; 5], infeasible: false };
        let plan = SchedulerPlan::new(&prior, &b, 3, false).unwrap();
        assert_eq!(plan.assignment, vec![0, 1, 2, 0, 1]);
        let b = Budgets { counts: vec![1, 9, 5, 5, 2], importance: vec![0.2; 5], infeasible: false };
        let plan = SchedulerPlan::new(&prior, &b, 2, true).unwrap();
        assert_eq!(plan.assignment, vec![1, 0, 1, 1, 0]);
    }
}
