//! One-dimensional benchmark: scalar state, identity observation operator,
//! multimodal mixture prior fitted to a synthetic ensemble.

use std::time::Instant;

use super::config::{Histogram, OnedConfig};
use super::{
    hmc_stage_seed, oned_generator, write_aic_table, Outputs, RunContext, RunSummary, AcceptanceEntry,
    STREAM_EM, STREAM_PRIOR_DATA, STREAM_SERIAL_GAUSSIAN, STREAM_SERIAL_HMC,
};
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::gmm::{select_model_aic, Ensemble, ModelSelection};
use crate::linalg::SpdMatrix;
use crate::posterior::{PosteriorModel, Potential};
use crate::rng::RngStream;
use crate::samplers::{run_chain, ChainConfig, ChainResult};
use crate::scheduler::{allocate_budgets, run_mc_mcmc, McResult, MechanismSpec, RunOptions, SchedulerPlan};

/// Quadrature sub-intervals per histogram bin.
const QUAD_PER_BIN: usize = 400;

/// The synthetic prior data, the selected mixture and the resulting posterior.
pub struct OnedProblem {
    pub data: Ensemble,
    pub selection: ModelSelection,
    pub model: PosteriorModel,
}

pub fn oned_problem(cfg: &OnedConfig, seed: u64) -> Result<OnedProblem> {
    if cfg.prior_size == 0 || cfg.n_ens == 0 {
        return Err(Error::Config("prior_size and n_ens must be positive".into()));
    }
    let generator = oned_generator();
    let mut rng = RngStream::new(seed, STREAM_PRIOR_DATA);
    let data = Ensemble::new((0..cfg.prior_size).map(|_| generator.sample(&mut rng)).collect())?;
    let mut em_rng = RngStream::new(seed, STREAM_EM);
    let [lo, hi] = cfg.candidates;
    let selection = select_model_aic(&data, lo..=hi, cfg.structure, &mut em_rng, &cfg.em)?;
    let model = PosteriorModel::new(
        selection.fit.mixture.clone(),
        ForwardOperator::identity(1),
        vec![cfg.observation],
        SpdMatrix::spherical(1, cfg.obs_variance)?,
    )?;
    Ok(OnedProblem { data, selection, model })
}

/// Posterior mass of each histogram bin, from trapezoid quadrature of
/// `exp(−J)` normalized over `[lo, hi]`.
pub fn posterior_bin_masses<P: Potential + ?Sized>(target: &P, hist: &Histogram) -> Result<Vec<f64>> {
    let (grid, density) = reference_density(target, hist)?;
    let mut masses = vec![0.0; hist.bins];
    for (b, mass) in masses.iter_mut().enumerate() {
        let s = b * QUAD_PER_BIN;
        for k in s..s + QUAD_PER_BIN {
            *mass += 0.5 * (density[k] + density[k + 1]) * (grid[k + 1] - grid[k]);
        }
    }
    Ok(masses)
}

/// Normalized posterior density on the quadrature grid.
fn reference_density<P: Potential + ?Sized>(target: &P, hist: &Histogram) -> Result<(Vec<f64>, Vec<f64>)> {
    validate_histogram(hist)?;
    if target.dim() != 1 {
        return Err(Error::InvalidArgument("quadrature reference needs a scalar state".into()));
    }
    let n = hist.bins * QUAD_PER_BIN;
    let h = (hist.hi - hist.lo) / n as f64;
    let grid: Vec<f64> = (0..=n).map(|k| hist.lo + k as f64 * h).collect();
    let j = grid.iter().map(|&x| target.potential(&[x])).collect::<Result<Vec<_>>>()?;
    let j_min = j.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut dens: Vec<f64> = j.iter().map(|v| (j_min - v).exp()).collect();
    let total: f64 = dens.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum();
    for d in &mut dens {
        *d /= total;
    }
    Ok((grid, dens))
}

fn validate_histogram(hist: &Histogram) -> Result<()> {
    if hist.bins == 0 || !(hist.hi > hist.lo) {
        return Err(Error::Config("histogram needs bins >= 1 and hi > lo".into()));
    }
    Ok(())
}

/// Weighted bin masses of the first coordinate. Bins are half-open except
/// the last; mass falling outside `[lo, hi]` is dropped, so the masses sum
/// to at most one.
pub fn weighted_histogram(ensemble: &Ensemble, hist: &Histogram) -> Result<Vec<f64>> {
    validate_histogram(hist)?;
    let mut masses = vec![0.0; hist.bins];
    let width = (hist.hi - hist.lo) / hist.bins as f64;
    for (j, x) in ensemble.members().iter().enumerate() {
        let v = x[0];
        if !(v >= hist.lo && v <= hist.hi) {
            continue;
        }
        let b = (((v - hist.lo) / width) as usize).min(hist.bins - 1);
        masses[b] += ensemble.weight(j);
    }
    Ok(masses)
}

/// `½ Σ |p_b − q_b|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn serial_chain(
    problem: &OnedProblem,
    cfg: &OnedConfig,
    spec: &MechanismSpec,
    seed: u64,
    stream: u64,
) -> Result<ChainResult> {
    let kernel = spec.build(&SpdMatrix::diagonal(problem.data.variance())?)?;
    let chain = ChainConfig {
        burn_in: cfg.burn_in,
        stride: cfg.stride,
        n_samples: cfg.n_ens,
        initial: problem.data.mean(),
        rng: RngStream::new(seed, stream),
    };
    run_chain(&problem.model, chain, &kernel)
}

pub fn run_oned_benchmark(cfg: &OnedConfig, ctx: &RunContext) -> Result<RunSummary> {
    let seed = ctx.seed.unwrap_or(cfg.seed);
    let mut out = Outputs::create(&ctx.out_dir)?;
    let mut summary = RunSummary::default();

    let t = Instant::now();
    let problem = oned_problem(cfg, seed)?;
    summary.timings.insert("prior_fit".into(), t.elapsed().as_secs_f64());
    summary.n_c_selected = Some(problem.selection.n_components());
    out.samples("prior_samples.csv", &problem.data)?;
    out.json("gmm.json", &problem.selection.fit.mixture.to_document())?;
    write_aic_table(&mut out, &problem.selection)?;

    let mut ensembles: Vec<(&str, Ensemble)> = Vec::new();
    let mut acceptance_rows: Vec<Vec<String>> = Vec::new();

    for (name, spec, stream) in [
        ("serial_gaussian", &cfg.serial_gaussian, STREAM_SERIAL_GAUSSIAN),
        ("serial_hmc", &cfg.hmc, STREAM_SERIAL_HMC),
    ] {
        match serial_chain(&problem, cfg, spec, seed, stream).and_then(|r| Ok((Ensemble::new(r.samples.clone())?, r))) {
            Ok((ens, r)) => {
                acceptance_rows.push(acceptance_row(name, "serial", "", &r));
                summary.acceptance.insert(
                    name.into(),
                    AcceptanceEntry { aggregate: r.acceptance_rate(), per_chain: vec![r.acceptance_rate()] },
                );
                summary.timings.insert(name.into(), r.wall_time);
                ensembles.push((name, ens));
            }
            Err(e) => {
                summary.errors.insert(name.into(), e.to_string());
            }
        }
    }

    let workers = ctx.workers(cfg.procs);
    let parallel = allocate_budgets(&problem.model, cfg.n_ens)
        .and_then(|b| SchedulerPlan::new(problem.model.prior(), &b, workers, ctx.balance || cfg.balance));
    match parallel {
        Ok(plan) => {
            for (name, spec, stage_seed) in [
                ("mc_gaussian", &cfg.parallel_gaussian, seed),
                ("mc_hmc", &cfg.hmc, hmc_stage_seed(seed)),
            ] {
                let opts = RunOptions { burn_in: cfg.burn_in, stride: cfg.stride, seed: stage_seed, weighted: cfg.weighted };
                match run_mc_mcmc(&problem.model, &plan, spec, &opts) {
                    Ok(r) => {
                        acceptance_rows.extend(mc_acceptance_rows(name, &r));
                        summary.record_mc(name, &r);
                        ensembles.push((name, r.ensemble));
                    }
                    Err(e) => {
                        summary.errors.insert(name.into(), e.to_string());
                    }
                }
            }
        }
        Err(e) => {
            summary.errors.insert("mc_plan".into(), e.to_string());
        }
    }

    let reference = posterior_bin_masses(&problem.model, &cfg.histogram)?;
    let (grid, density) = reference_density(&problem.model, &cfg.histogram)?;
    let density_rows: Vec<Vec<f64>> =
        grid.iter().zip(&density).step_by(QUAD_PER_BIN / 10).map(|(x, d)| vec![*x, *d]).collect();
    out.csv("reference_density.csv", &["x", "density"], &density_rows)?;

    let mut header = vec!["bin_lo", "bin_hi", "reference"];
    let mut columns = Vec::new();
    for (name, ens) in &ensembles {
        out.samples(&format!("samples_{name}.csv"), ens)?;
        let h = weighted_histogram(ens, &cfg.histogram)?;
        summary.metrics.insert(format!("tv_{name}"), total_variation(&h, &reference));
        header.push(name);
        columns.push(h);
    }
    let width = (cfg.histogram.hi - cfg.histogram.lo) / cfg.histogram.bins as f64;
    let hist_rows: Vec<Vec<f64>> = (0..cfg.histogram.bins)
        .map(|b| {
            let lo = cfg.histogram.lo + b as f64 * width;
            let mut row = vec![lo, lo + width, reference[b]];
            row.extend(columns.iter().map(|c| c[b]));
            row
        })
        .collect();
    out.csv("histogram.csv", &header, &hist_rows)?;
    out.csv_text(
        "acceptance.csv",
        &["sampler", "chain", "component", "proposals", "accepted", "acceptance"],
        &acceptance_rows,
    )?;
    out.finish(summary)
}

fn acceptance_row(sampler: &str, chain: &str, component: &str, r: &ChainResult) -> Vec<String> {
    vec![
        sampler.into(),
        chain.into(),
        component.into(),
        r.proposals_made.to_string(),
        r.proposals_accepted.to_string(),
        r.acceptance_rate().to_string(),
    ]
}

/// One row per chain that ran, then an aggregate row.
pub(crate) fn mc_acceptance_rows(sampler: &str, r: &McResult) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = r
        .chains
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            c.result.as_ref().map(|res| acceptance_row(sampler, &i.to_string(), &c.component.to_string(), res))
        })
        .collect();
    let made: u64 = r.chains.iter().filter_map(|c| c.result.as_ref()).map(|c| c.proposals_made).sum();
    let acc: u64 = r.chains.iter().filter_map(|c| c.result.as_ref()).map(|c| c.proposals_accepted).sum();
    rows.push(vec![
        sampler.into(),
        "all".into(),
        String::new(),
        made.to_string(),
        acc.to_string(),
        r.aggregate_acceptance.to_string(),
    ]);
    rows
}
