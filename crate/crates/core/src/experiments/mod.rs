//! End-to-end experiment drivers and their artifacts.
//!
//! Every driver takes a config plus a [`RunContext`] and writes its files
//! into the context's output directory. Apart from the `timings` block of
//! `summary.json`, all outputs are a pure function of the config and seed.

mod bench;
pub mod config;
mod deblur;
mod emfit;
mod oned;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use bench::{cost_input, run_speedup_benchmark};
pub use deblur::{builtin_phantom, deblur_data, run_deblur_experiment, run_tikhonov_baseline, DeblurData, PHANTOM_SIZE};
pub use emfit::run_em_fit;
pub use oned::{
    oned_problem, posterior_bin_masses, run_oned_benchmark, total_variation, weighted_histogram, OnedProblem,
};

use crate::error::{check_dim, Error, Result};
use crate::gmm::{Ensemble, GaussianMixture, ModelSelection};
use crate::image::ImageGrid;
use crate::rng::RESERVED_STREAM_BASE;
use crate::scheduler::McResult;

pub const STREAM_PRIOR_DATA: u64 = RESERVED_STREAM_BASE;
pub const STREAM_EM: u64 = RESERVED_STREAM_BASE + 1;
pub const STREAM_SERIAL_GAUSSIAN: u64 = RESERVED_STREAM_BASE + 2;
pub const STREAM_SERIAL_HMC: u64 = RESERVED_STREAM_BASE + 3;
pub const STREAM_NOISE: u64 = RESERVED_STREAM_BASE + 4;
pub const STREAM_PRIOR_POOL: u64 = RESERVED_STREAM_BASE + 5;
pub const STREAM_SUBSAMPLE: u64 = RESERVED_STREAM_BASE + 6;

/// Seed of the multi-chain HMC stage, so that it does not share streams
/// with the Gaussian-proposal stage of the same run.
pub fn hmc_stage_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// The eight-component generating mixture of the 1D benchmark,
/// as `(weight, mean, variance)`.
pub const ONED_GENERATOR: [(f64, f64, f64); 8] = [
    (0.09, -6.0, 0.20),
    (0.19, -2.5, 0.28),
    (0.09, 0.0, 0.08),
    (0.28, 2.5, 0.24),
    (0.15, 6.0, 0.28),
    (0.15, 6.5, 0.08),
    (0.03, 7.5, 0.12),
    (0.02, 8.0, 0.04),
];

pub fn oned_generator() -> GaussianMixture {
    GaussianMixture::univariate(&ONED_GENERATOR).expect("generator parameters are valid")
}

/// `‖x − x_true‖ / ‖x_true‖`.
pub fn relative_error(x: &[f64], x_true: &[f64]) -> Result<f64> {
    check_dim(x_true.len(), x.len())?;
    let denom = crate::linalg::norm(x_true);
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = x.iter().zip(x_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(num / denom)
}

/// Options supplied on the command line rather than in the config.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    /// Relative paths in the config resolve against this directory.
    pub config_dir: PathBuf,
    pub seed: Option<u64>,
    pub procs: Option<usize>,
    pub balance: bool,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), config_dir: PathBuf::from("."), seed: None, procs: None, balance: false }
    }

    pub(crate) fn workers(&self, configured: usize) -> usize {
        match self.procs.unwrap_or(configured) {
            0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            p => p,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AcceptanceEntry {
    pub aggregate: f64,
    pub per_chain: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub acceptance: BTreeMap<String, AcceptanceEntry>,
    pub relative_errors: BTreeMap<String, f64>,
    /// Wall-clock seconds per stage; the only nondeterministic field.
    pub timings: BTreeMap<String, f64>,
    pub n_c_selected: Option<usize>,
    pub alpha_star: Option<f64>,
    pub manifest: Vec<String>,
    /// Additional scalar results of a driver.
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    /// Stages that failed, with their error messages.
    pub errors: BTreeMap<String, String>,
}

impl RunSummary {
    pub(crate) fn record_mc(&mut self, name: &str, r: &McResult) {
        let per_chain = r
            .chains
            .iter()
            .map(|c| c.result.as_ref().map(|r| r.acceptance_rate()).unwrap_or(f64::NAN))
            .collect();
        self.acceptance.insert(name.into(), AcceptanceEntry { aggregate: r.aggregate_acceptance, per_chain });
        self.timings.insert(name.into(), r.wall_time);
    }
}

/// Writes artifacts into one directory and keeps a manifest of them.
pub(crate) struct Outputs {
    dir: PathBuf,
    manifest: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), manifest: Vec::new() })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.push(name.to_string());
        self.dir.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }

    /// One row per member: coordinates `x0..`, then the member's weight.
    pub fn samples(&mut self, name: &str, ensemble: &Ensemble) -> Result<()> {
        write_samples_csv(self.path(name), ensemble)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let rows: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(f64::to_string).collect()).collect();
        self.csv_text(name, header, &rows)
    }

    pub fn csv_text(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn pgm(&mut self, name: &str, image: &ImageGrid) -> Result<()> {
        image.write_pgm(self.path(name))
    }

    /// Writes `summary.json`. Stage failures recorded in the summary turn
    /// into an error after the file is written.
    pub fn finish(mut self, mut summary: RunSummary) -> Result<RunSummary> {
        self.manifest.push("summary.json".into());
        self.manifest.sort();
        summary.manifest = self.manifest.clone();
        let mut f = std::fs::File::create(self.dir.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        writeln!(f)?;
        if !summary.errors.is_empty() {
            let msg: Vec<String> = summary.errors.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            return Err(Error::Numerical(format!("failed stages: {}", msg.join("; "))));
        }
        Ok(summary)
    }
}

/// `aic.csv` with one row per candidate; failed candidates have empty scores.
pub(crate) fn write_aic_table(out: &mut Outputs, selection: &ModelSelection) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let rows: Vec<Vec<String>> = selection
        .candidates
        .iter()
        .map(|c| vec![c.n_components.to_string(), opt(c.aic), opt(c.log_likelihood)])
        .collect();
    out.csv_text("aic.csv", &["n_components", "aic", "log_likelihood"], &rows)
}

pub fn write_samples_csv(path: impl AsRef<Path>, ensemble: &Ensemble) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ensemble.dim()).map(|k| format!("x{k}")).collect();
    header.push("weight".into());
    w.write_record(&header)?;
    for (j, m) in ensemble.members().iter().enumerate() {
        let mut row: Vec<String> = m.iter().map(|v| v.to_string()).collect();
        row.push(ensemble.weight(j).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a sample CSV as written by [`write_samples_csv`].
pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<Ensemble> {
    let mut r = csv::Reader::from_path(path)?;
    let has_weight = r.headers()?.iter().last() == Some("weight");
    let mut members = Vec::new();
    let mut weights = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if has_weight {
            weights.push(vals.pop().unwrap_or(0.0));
        }
        members.push(vals);
    }
    if has_weight {
        Ensemble::with_weights(members, weights)
    } else {
        Ensemble::new(members)
    }
}

/// Reads plain numeric rows, skipping a header line if it does not parse.
pub fn read_data_csv(path: impl AsRef<Path>) -> Result<Ensemble> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut members = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => members.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Config(format!("row {}: {e}", i + 1))),
        }
    }
    if members.is_empty() {
        return Err(Error::Config("data file has no rows".into()));
    }
    Ensemble::new(members)
}
