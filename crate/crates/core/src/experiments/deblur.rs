//! Image deblurring: separable Gaussian blur, additive white noise, a
//! mixture prior fitted to perturbed copies of the blurred image.

use std::time::Instant;

use super::config::{DeblurConfig, NoiseInterpretation, RegularizerConfig};
use super::oned::mc_acceptance_rows;
use super::{
    hmc_stage_seed, relative_error, write_aic_table, Outputs, RunContext, RunSummary, STREAM_EM, STREAM_NOISE,
    STREAM_PRIOR_POOL, STREAM_SUBSAMPLE,
};
use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::gmm::{select_model_aic, Ensemble};
use crate::image::{disk_phantom, ImageGrid};
use crate::linalg::SpdMatrix;
use crate::posterior::PosteriorModel;
use crate::rng::RngStream;
use crate::scheduler::{allocate_budgets, run_mc_mcmc, RunOptions, SchedulerPlan};
use crate::tikhonov::{log_grid, lcurve_select_alpha, LCurve, Regularizer, TikhonovProblem};

/// Side length of the built-in phantom.
pub const PHANTOM_SIZE: usize = 32;

pub fn builtin_phantom() -> ImageGrid {
    disk_phantom(PHANTOM_SIZE, PHANTOM_SIZE, 0.1, 0.9, 8.0)
}

/// Ground truth, forward model and noisy data of one deblurring run.
pub struct DeblurData {
    pub truth: ImageGrid,
    pub operator: ForwardOperator,
    pub blurred: Vec<f64>,
    pub noisy: Vec<f64>,
    pub noise_variance: f64,
}

fn variance_from(level: f64, mean: f64, how: NoiseInterpretation) -> Result<f64> {
    let v = match how {
        NoiseInterpretation::Variance => level * mean,
        NoiseInterpretation::Std => (level * mean).powi(2),
    };
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("noise variance {v} must be positive")));
    }
    Ok(v)
}

pub fn deblur_data(cfg: &DeblurConfig, seed: u64, ctx: &RunContext) -> Result<DeblurData> {
    let truth = match &cfg.image {
        Some(p) => ImageGrid::read_pgm(ctx.config_dir.join(p))?,
        None => builtin_phantom(),
    };
    let b = &cfg.blur;
    let mut operator = ForwardOperator::blur(truth.rows(), truth.cols(), b.width, b.sigma, b.boundary)?;
    if b.saturate {
        operator = ForwardOperator::saturated(operator);
    }
    let blurred = operator.apply(truth.pixels())?;
    let noise_variance = variance_from(cfg.noise.level, truth.mean(), cfg.noise.interpretation)?;
    let sd = noise_variance.sqrt();
    let mut rng = RngStream::new(seed, STREAM_NOISE);
    let noisy = blurred.iter().map(|v| v + sd * rng.standard_normal()).collect();
    Ok(DeblurData { truth, operator, blurred, noisy, noise_variance })
}

/// Perturbed copies of the blurred image, then a uniform subsample
/// without replacement.
fn prior_ensemble(cfg: &DeblurConfig, data: &DeblurData, seed: u64) -> Result<Ensemble> {
    let p = &cfg.prior;
    if p.subsample == 0 || p.subsample > p.pool {
        return Err(Error::Config(format!("prior subsample {} must lie in 1..={}", p.subsample, p.pool)));
    }
    let sd = variance_from(p.level, data.truth.mean(), p.interpretation)?.sqrt();
    let mut rng = RngStream::new(seed, STREAM_PRIOR_POOL);
    let mut pool: Vec<Vec<f64>> = (0..p.pool)
        .map(|_| data.blurred.iter().map(|v| v + sd * rng.standard_normal()).collect())
        .collect();
    let mut pick = RngStream::new(seed, STREAM_SUBSAMPLE);
    for i in 0..p.subsample {
        let j = i + pick.index(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(p.subsample);
    Ensemble::new(pool)
}

fn regularizer(cfg: &RegularizerConfig, truth: &ImageGrid) -> Regularizer {
    match *cfg {
        RegularizerConfig::Identity => Regularizer::Identity,
        RegularizerConfig::Laplacian { shift } => Regularizer::Laplacian { rows: truth.rows(), cols: truth.cols(), shift },
    }
}

fn tikhonov_curve(cfg: &DeblurConfig, data: &DeblurData) -> Result<LCurve> {
    let t = &cfg.tikhonov;
    let template = TikhonovProblem::new(
        data.operator.clone(),
        data.noisy.clone(),
        &SpdMatrix::spherical(data.noisy.len(), data.noise_variance)?,
        regularizer(&t.regularizer, &data.truth),
        1.0,
    )?;
    if !(t.alpha_min > 0.0 && t.alpha_max > t.alpha_min && t.alpha_max.is_finite()) {
        return Err(Error::Config(format!("alpha range [{}, {}] is invalid", t.alpha_min, t.alpha_max)));
    }
    let alphas = log_grid(t.alpha_min, t.alpha_max, t.n_alpha);
    lcurve_select_alpha(&template, &alphas, &data.noisy, &t.solver)
}

fn image(truth: &ImageGrid, pixels: Vec<f64>) -> Result<ImageGrid> {
    ImageGrid::new(truth.rows(), truth.cols(), pixels)
}

fn record_tikhonov(out: &mut Outputs, summary: &mut RunSummary, data: &DeblurData, curve: &LCurve) -> Result<()> {
    crate::tikhonov::write_lcurve_csv(curve, out.path("lcurve.csv"))?;
    out.pgm("tikhonov.pgm", &image(&data.truth, curve.solution.clone())?)?;
    summary.alpha_star = Some(curve.alpha_star);
    summary.relative_errors.insert("tikhonov".into(), relative_error(&curve.solution, data.truth.pixels())?);
    if curve.degenerate {
        summary.warnings.push("L-curve has no corner; middle of the grid used".into());
    }
    let unconverged = curve.points.iter().filter(|p| !p.converged).count();
    if unconverged > 0 {
        summary.warnings.push(format!("{unconverged} L-curve solves hit the iteration limit"));
    }
    Ok(())
}

fn record_inputs(out: &mut Outputs, summary: &mut RunSummary, data: &DeblurData) -> Result<()> {
    out.pgm("true.pgm", &data.truth)?;
    out.pgm("blurred.pgm", &image(&data.truth, data.blurred.clone())?)?;
    out.pgm("noisy.pgm", &image(&data.truth, data.noisy.clone())?)?;
    summary.relative_errors.insert("noisy".into(), relative_error(&data.noisy, data.truth.pixels())?);
    summary.metrics.insert("noise_variance".into(), data.noise_variance);
    summary.metrics.insert("mean_intensity".into(), data.truth.mean());
    Ok(())
}

pub fn run_deblur_experiment(cfg: &DeblurConfig, ctx: &RunContext) -> Result<RunSummary> {
    let seed = ctx.seed.unwrap_or(cfg.seed);
    let data = deblur_data(cfg, seed, ctx)?;
    let mut out = Outputs::create(&ctx.out_dir)?;
    let mut summary = RunSummary::default();
    record_inputs(&mut out, &mut summary, &data)?;

    let t = Instant::now();
    let prior_samples = prior_ensemble(cfg, &data, seed)?;
    let mut em_rng = RngStream::new(seed, STREAM_EM);
    let [lo, hi] = cfg.candidates;
    let selection = select_model_aic(&prior_samples, lo..=hi, cfg.structure, &mut em_rng, &cfg.em)?;
    summary.timings.insert("prior_fit".into(), t.elapsed().as_secs_f64());
    summary.n_c_selected = Some(selection.n_components());
    out.samples("prior_samples.csv", &prior_samples)?;
    out.json("gmm.json", &selection.fit.mixture.to_document())?;
    write_aic_table(&mut out, &selection)?;

    let model = PosteriorModel::new(
        selection.fit.mixture.clone(),
        data.operator.clone(),
        data.noisy.clone(),
        SpdMatrix::spherical(data.noisy.len(), data.noise_variance)?,
    )?;
    let budgets = allocate_budgets(&model, cfg.n_ens)?;
    let plan = SchedulerPlan::new(model.prior(), &budgets, ctx.workers(cfg.procs), ctx.balance || cfg.balance)?;
    let mut acceptance_rows = Vec::new();
    for (name, spec, stage_seed) in [("hmc", &cfg.hmc, hmc_stage_seed(seed)), ("gaussian", &cfg.gaussian, seed)] {
        let opts = RunOptions { burn_in: cfg.burn_in, stride: cfg.stride, seed: stage_seed, weighted: cfg.weighted };
        match run_mc_mcmc(&model, &plan, spec, &opts) {
            Ok(r) => {
                acceptance_rows.extend(mc_acceptance_rows(name, &r));
                summary.record_mc(name, &r);
                let mean = r.ensemble.mean();
                let median = r.ensemble.median();
                summary.relative_errors.insert(format!("{name}_mean"), relative_error(&mean, data.truth.pixels())?);
                summary
                    .relative_errors
                    .insert(format!("{name}_median"), relative_error(&median, data.truth.pixels())?);
                out.pgm(&format!("{name}_mean.pgm"), &image(&data.truth, mean)?)?;
                out.pgm(&format!("{name}_median.pgm"), &image(&data.truth, median)?)?;
                out.samples(&format!("samples_{name}.csv"), &r.ensemble)?;
            }
            Err(e) => {
                summary.errors.insert(name.into(), e.to_string());
            }
        }
    }
    out.csv_text(
        "acceptance.csv",
        &["sampler", "chain", "component", "proposals", "accepted", "acceptance"],
        &acceptance_rows,
    )?;

    let t = Instant::now();
    match tikhonov_curve(cfg, &data) {
        Ok(curve) => record_tikhonov(&mut out, &mut summary, &data, &curve)?,
        Err(e) => {
            summary.errors.insert("tikhonov".into(), e.to_string());
        }
    }
    summary.timings.insert("tikhonov".into(), t.elapsed().as_secs_f64());
    out.finish(summary)
}

/// The regularized least-squares baseline on its own.
pub fn run_tikhonov_baseline(cfg: &DeblurConfig, ctx: &RunContext) -> Result<RunSummary> {
    let seed = ctx.seed.unwrap_or(cfg.seed);
    let data = deblur_data(cfg, seed, ctx)?;
    let mut out = Outputs::create(&ctx.out_dir)?;
    let mut summary = RunSummary::default();
    record_inputs(&mut out, &mut summary, &data)?;
    let t = Instant::now();
    let curve = tikhonov_curve(cfg, &data)?;
    summary.timings.insert("tikhonov".into(), t.elapsed().as_secs_f64());
    record_tikhonov(&mut out, &mut summary, &data, &curve)?;
    out.finish(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_interpretations() {
        assert_eq!(variance_from(0.09, 0.5, NoiseInterpretation::Variance).unwrap(), 0.045);
        assert!((variance_from(0.1, 0.5, NoiseInterpretation::Std).unwrap() - 0.0025).abs() < 1e-18);
        assert!(variance_from(0.0, 0.5, NoiseInterpretation::Std).is_err());
    }

    #[test]
    fn subsample_is_distinct_members_of_pool() {
        let cfg = DeblurConfig::default();
        let ctx = RunContext::new(".");
        let data = deblur_data(&cfg, 3, &ctx).unwrap();
        let e = prior_ensemble(&cfg, &data, 3).unwrap();
        assert_eq!(e.len(), 30);
        for i in 0..e.len() {
            for j in 0..i {
                assert_ne!(e.members()[i], e.members()[j]);
            }
        }
    }
}
