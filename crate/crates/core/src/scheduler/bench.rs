//! Wall-clock scaling measurements next to the cost-model prediction.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::cost::{predict_cost, CostModelInput};
use super::{run_mc_mcmc, Budgets, MechanismSpec, RunOptions, SchedulerPlan};
use crate::error::{Error, Result};
use crate::posterior::PosteriorModel;

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub p: usize,
    /// Fastest wall time over the repetitions.
    pub wall_s: f64,
    pub speedup: f64,
    pub efficiency: f64,
    pub pred_speedup: f64,
    pub pred_efficiency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
    pub logical_cpus: usize,
    /// True when some `p` exceeds the number of logical processors.
    pub oversubscribed: bool,
}

/// Runs the multi-chain sampler at every worker count in `p_values` with the
/// same seed. Measured speedup is `wall(1) / wall(p)`; the prediction comes
/// from `cost` with `p` substituted.
#[allow(clippy::too_many_arguments)]
pub fn benchmark_speedup(
    model: &PosteriorModel,
    budgets: &Budgets,
    mechanism: &MechanismSpec,
    opts: &RunOptions,
    balance: bool,
    p_values: &[usize],
    repetitions: usize,
    cost: &CostModelInput,
) -> Result<BenchmarkTable> {
    if p_values.is_empty() || p_values.contains(&0) {
        return Err(Error::InvalidArgument("p_values must be non-empty and positive".into()));
    }
    let logical_cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let max_p = *p_values.iter().max().expect("non-empty");
    let oversubscribed = max_p > logical_cpus;
    if oversubscribed {
        log::warn!("benchmark oversubscribed: p up to {max_p} on {logical_cpus} logical CPUs");
    }
    let time = |p: usize| -> Result<f64> {
        let plan = SchedulerPlan::new(model.prior(), budgets, p, balance)?;
        let mut best = f64::INFINITY;
        for _ in 0..repetitions.max(1) {
            best = best.min(run_mc_mcmc(model, &plan, mechanism, opts)?.wall_time);
        }
        Ok(best)
    };
    let base = time(1)?;
    let mut rows = Vec::with_capacity(p_values.len());
    for &p in p_values {
        let wall_s = if p == 1 { base } else { time(p)? };
        let speedup = base / wall_s;
        let pred = predict_cost(&CostModelInput { p, ..cost.clone() })?;
        rows.push(BenchmarkRow {
            p,
            wall_s,
            speedup,
            efficiency: speedup / p as f64,
            pred_speedup: pred.speedup,
            pred_efficiency: pred.efficiency,
        });
    }
    Ok(BenchmarkTable { rows, logical_cpus, oversubscribed })
}

pub fn write_benchmark_csv(table: &BenchmarkTable, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "p,wall_s,speedup,efficiency,pred_speedup,pred_efficiency")?;
    for r in &table.rows {
        writeln!(f, "{},{},{},{},{},{}", r.p, r.wall_s, r.speedup, r.efficiency, r.pred_speedup, r.pred_efficiency)?;
    }
    f.flush()?;
    Ok(())
}
