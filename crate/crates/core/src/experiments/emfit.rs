//! Stand-alone mixture fitting with AIC model selection.

use super::config::EmFitConfig;
use super::{oned_generator, read_data_csv, write_aic_table, Outputs, RunContext, RunSummary, STREAM_EM, STREAM_PRIOR_DATA};
use crate::error::{Error, Result};
use crate::gmm::{select_model_aic, Ensemble};
use crate::rng::RngStream;

pub fn run_em_fit(cfg: &EmFitConfig, ctx: &RunContext) -> Result<RunSummary> {
    let seed = ctx.seed.unwrap_or(cfg.seed);
    let data = match &cfg.data {
        Some(p) => read_data_csv(ctx.config_dir.join(p))?,
        None => {
            if cfg.generate == 0 {
                return Err(Error::Config("generate must be positive when no data file is given".into()));
            }
            let g = oned_generator();
            let mut rng = RngStream::new(seed, STREAM_PRIOR_DATA);
            Ensemble::new((0..cfg.generate).map(|_| g.sample(&mut rng)).collect())?
        }
    };
    let mut out = Outputs::create(&ctx.out_dir)?;
    let mut summary = RunSummary::default();
    if cfg.data.is_none() {
        out.samples("data.csv", &data)?;
    }
    let mut rng = RngStream::new(seed, STREAM_EM);
    let [lo, hi] = cfg.candidates;
    let t = std::time::Instant::now();
    let selection = select_model_aic(&data, lo..=hi, cfg.structure, &mut rng, &cfg.em)?;
    summary.timings.insert("em".into(), t.elapsed().as_secs_f64());
    summary.n_c_selected = Some(selection.n_components());
    out.json("gmm.json", &selection.fit.mixture.to_document())?;
    write_aic_table(&mut out, &selection)?;
    let history: Vec<Vec<f64>> =
        selection.fit.history.iter().enumerate().map(|(i, l)| vec![i as f64, *l]).collect();
    out.csv("em_history.csv", &["iteration", "log_likelihood"], &history)?;
    summary.metrics.insert("aic".into(), selection.aic);
    summary.metrics.insert("log_likelihood".into(), selection.fit.log_likelihood);
    summary.metrics.insert("iterations".into(), selection.fit.iterations as f64);
    summary.metrics.insert("repairs".into(), selection.fit.repairs as f64);
    if !selection.fit.converged {
        summary.warnings.push("EM hit the iteration limit".into());
    }
    out.finish(summary)
}
