//! Leading-term cost model of the multi-chain sampler.
//!
//! Sampling costs are in abstract operation units (unit constants on every
//! big-O term); communication terms use the linear model `t_s + t_w · words`
//! over a `log₂ p`-deep tree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GmmRegime {
    /// Diagonal or spherical component covariances.
    #[serde(alias = "spherical")]
    Diagonal,
    Tied,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalRegime {
    /// Gaussian proposal with a diagonal covariance.
    Diagonal,
    /// Gaussian proposal with a dense covariance.
    Full,
    Hmc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModelInput {
    pub p: usize,
    pub n_c: usize,
    pub n_ens: usize,
    pub n_var: usize,
    pub burn_in: usize,
    pub stride: usize,
    /// Leapfrog steps per HMC trajectory; ignored for Gaussian proposals.
    pub leapfrog_steps: usize,
    pub t_s: f64,
    pub t_w: f64,
    pub gmm: GmmRegime,
    pub proposal: ProposalRegime,
    /// Efficiency held fixed by the isoefficiency function.
    #[serde(default = "default_efficiency")]
    pub target_efficiency: f64,
}

fn default_efficiency() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    /// Cost of one chain step.
    pub unit_cost: f64,
    pub t_serial: f64,
    /// `max(n_c / p, 1)`: chains per worker under the divisible-work idealisation.
    pub chains_per_worker: f64,
    pub t_parallel: f64,
    pub speedup: f64,
    pub efficiency: f64,
    /// Same quantities with `ceil(n_c / p)` whole chains per worker.
    pub t_parallel_integral: f64,
    pub speedup_integral: f64,
    pub efficiency_integral: f64,
    pub comm_broadcast: f64,
    pub comm_gather: f64,
    pub comm_cost: f64,
    pub t_parallel_total: f64,
    pub speedup_total: f64,
    pub efficiency_total: f64,
    /// `p · t_parallel_total`.
    pub total_parallel_cost: f64,
    /// `total_parallel_cost − t_serial`.
    pub overhead: f64,
    /// Dominant isoefficiency term `k · t_w · (…) · p · log p` with `k = E/(1−E)`.
    pub isoefficiency: f64,
}

impl CostModelInput {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("cost model: {m}")));
        if self.p == 0 || self.n_c == 0 || self.n_var == 0 || self.stride == 0 {
            return bad("p, n_c, n_var and stride must be >= 1");
        }
        if self.proposal == ProposalRegime::Hmc && self.leapfrog_steps == 0 {
            return bad("HMC needs leapfrog_steps >= 1");
        }
        if !(self.t_s >= 0.0 && self.t_w >= 0.0) {
            return bad("t_s and t_w must be nonnegative");
        }
        if !(self.target_efficiency > 0.0 && self.target_efficiency < 1.0) {
            return bad("target_efficiency must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn unit_cost(&self) -> f64 {
        let n = self.n_var as f64;
        match (self.proposal, self.gmm) {
            (ProposalRegime::Diagonal, GmmRegime::Diagonal) => n,
            (ProposalRegime::Hmc, _) => self.leapfrog_steps as f64 * n * n,
            _ => n * n,
        }
    }
}

pub fn predict_cost(input: &CostModelInput) -> Result<CostReport> {
    input.validate()?;
    let p = input.p as f64;
    let n_c = input.n_c as f64;
    let n_ens = input.n_ens as f64;
    let n_var = input.n_var as f64;
    let b_s = input.burn_in as f64;
    let m_s = input.stride as f64;
    let c = input.unit_cost();

    let t_serial = (b_s + m_s * n_ens) * c;
    let per_chain = (b_s + m_s * n_ens / n_c) * c;
    let chains_per_worker = (n_c / p).max(1.0);
    let t_parallel = chains_per_worker * per_chain;
    // T_s / T_p rearranged so that b_s = 0 gives the ratio of chain counts exactly.
    let burn_in_factor = (b_s + m_s * n_ens) / (n_c * b_s + m_s * n_ens);
    let speedup = input.p.min(input.n_c) as f64 * burn_in_factor;
    let whole_chains = input.n_c.div_ceil(input.p) as f64;
    let t_parallel_integral = whole_chains * per_chain;
    let speedup_integral = n_c / whole_chains * burn_in_factor;

    let log_p = p.log2();
    let words = match input.gmm {
        GmmRegime::Diagonal => (2.0 * n_var + 1.0) * n_c,
        GmmRegime::Tied => (n_var * n_var / n_c + n_var + 1.0) * n_c,
        GmmRegime::Full => (n_var * n_var + n_var + 1.0) * n_c,
    };
    let comm_broadcast = (input.t_s + input.t_w * words) * log_p;
    let comm_gather = (input.t_s + input.t_w * n_ens * n_var) * log_p;
    let comm_cost = comm_broadcast + comm_gather;
    let t_parallel_total = t_parallel + comm_cost;
    let speedup_total = t_serial / t_parallel_total;
    let total_parallel_cost = p * t_parallel_total;

    let e = input.target_efficiency;
    let dominant = match input.gmm {
        GmmRegime::Diagonal => n_ens * n_var,
        GmmRegime::Tied => (n_ens + n_var) * n_var,
        GmmRegime::Full => (n_ens + n_var * n_c) * n_var,
    };
    let isoefficiency = e / (1.0 - e) * input.t_w * dominant * p * log_p;

    Ok(CostReport {
        unit_cost: c,
        t_serial,
        chains_per_worker,
        t_parallel,
        speedup,
        efficiency: speedup / p,
        t_parallel_integral,
        speedup_integral,
        efficiency_integral: speedup_integral / p,
        comm_broadcast,
        comm_gather,
        comm_cost,
        t_parallel_total,
        speedup_total,
        efficiency_total: speedup_total / p,
        total_parallel_cost,
        overhead: total_parallel_cost - t_serial,
        isoefficiency,
    })
}
