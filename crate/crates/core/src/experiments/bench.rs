//! Measured versus predicted speedup of the multi-chain sampler on the 1D problem.

use super::config::BenchConfig;
use super::oned::oned_problem;
use super::{Outputs, RunContext, RunSummary};
use crate::error::Result;
use crate::gmm::CovarianceStructure;
use crate::scheduler::{
    allocate_budgets, benchmark_speedup, predict_cost, write_benchmark_csv, CostModelInput, GmmRegime,
    MechanismSpec, ProposalRegime, RunOptions,
};

fn gmm_regime(s: CovarianceStructure) -> GmmRegime {
    match s {
        CovarianceStructure::Diagonal | CovarianceStructure::Spherical => GmmRegime::Diagonal,
        CovarianceStructure::Tied => GmmRegime::Tied,
        CovarianceStructure::Full => GmmRegime::Full,
    }
}

/// Cost-model inputs matching a run, evaluated at `p = 1`.
pub fn cost_input(cfg: &BenchConfig, n_c: usize, n_var: usize, structure: CovarianceStructure) -> CostModelInput {
    let gmm = gmm_regime(structure);
    let (proposal, leapfrog_steps) = match cfg.mechanism {
        MechanismSpec::Hmc { steps, .. } => (ProposalRegime::Hmc, steps),
        MechanismSpec::Gaussian { .. } if gmm == GmmRegime::Diagonal => (ProposalRegime::Diagonal, 0),
        MechanismSpec::Gaussian { .. } => (ProposalRegime::Full, 0),
    };
    CostModelInput {
        p: 1,
        n_c,
        n_ens: cfg.oned.n_ens,
        n_var,
        burn_in: cfg.oned.burn_in,
        stride: cfg.oned.stride,
        leapfrog_steps,
        t_s: cfg.t_s,
        t_w: cfg.t_w,
        gmm,
        proposal,
        target_efficiency: 0.8,
    }
}

pub fn run_speedup_benchmark(cfg: &BenchConfig, ctx: &RunContext) -> Result<RunSummary> {
    let seed = ctx.seed.unwrap_or(cfg.oned.seed);
    let mut out = Outputs::create(&ctx.out_dir)?;
    let mut summary = RunSummary::default();
    let problem = oned_problem(&cfg.oned, seed)?;
    let n_c = problem.selection.n_components();
    summary.n_c_selected = Some(n_c);
    let budgets = allocate_budgets(&problem.model, cfg.oned.n_ens)?;
    let opts = RunOptions { burn_in: cfg.oned.burn_in, stride: cfg.oned.stride, seed, weighted: cfg.oned.weighted };
    let cost = cost_input(cfg, n_c, problem.model.dim(), cfg.oned.structure);
    let table = benchmark_speedup(
        &problem.model,
        &budgets,
        &cfg.mechanism,
        &opts,
        ctx.balance || cfg.oned.balance,
        &cfg.p_values,
        cfg.repetitions,
        &cost,
    )?;
    write_benchmark_csv(&table, out.path("speedup.csv"))?;
    let predictions = cfg
        .p_values
        .iter()
        .map(|&p| predict_cost(&CostModelInput { p, ..cost.clone() }))
        .collect::<Result<Vec<_>>>()?;
    out.json("cost_model.json", &serde_json::json!({ "input": cost, "predictions": predictions }))?;
    for row in &table.rows {
        summary.timings.insert(format!("p{}", row.p), row.wall_s);
    }
    summary.metrics.insert("logical_cpus".into(), table.logical_cpus as f64);
    if table.oversubscribed {
        summary.warnings.push(format!(
            "oversubscribed: p up to {} on {} logical CPUs",
            cfg.p_values.iter().max().copied().unwrap_or(0),
            table.logical_cpus
        ));
    }
    out.finish(summary)
}
