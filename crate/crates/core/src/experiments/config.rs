//! JSON run configurations. Unknown keys are rejected; every field has a
//! default so an empty object `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Boundary;
use crate::gmm::{CovarianceStructure, EmOptions};
use crate::scheduler::MechanismSpec;
use crate::tikhonov::SolverOptions;

/// Reads a config file. A top-level `"kind"` key, when present, must name
/// the subcommand being run.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, kind)
}

pub fn parse_config<T: DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    if let Some(obj) = value.as_object_mut() {
        if let Some(k) = obj.remove("kind") {
            if k.as_str() != Some(kind) {
                return Err(Error::Config(format!("config is for {k}, not \"{kind}\"")));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseInterpretation {
    /// The level times the mean intensity is the variance.
    Variance,
    /// The level times the mean intensity is the standard deviation.
    Std,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Histogram {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        Self { bins: 50, lo: -10.0, hi: 10.0 }
    }
}

fn default_hmc() -> MechanismSpec {
    MechanismSpec::Hmc { steps: 20, trajectory_length: 1.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnedConfig {
    pub seed: u64,
    /// Size of the synthetic prior ensemble drawn from the generating mixture.
    pub prior_size: usize,
    /// Posterior samples per sampler.
    pub n_ens: usize,
    pub candidates: [usize; 2],
    pub structure: CovarianceStructure,
    pub em: EmOptions,
    pub observation: f64,
    pub obs_variance: f64,
    pub burn_in: usize,
    pub stride: usize,
    /// Serial random walk; the scale multiplies the prior-ensemble variance.
    pub serial_gaussian: MechanismSpec,
    /// Per-chain random walk; the scale multiplies the component covariance over `N_var`.
    pub parallel_gaussian: MechanismSpec,
    pub hmc: MechanismSpec,
    pub weighted: bool,
    pub histogram: Histogram,
    /// Worker threads; `0` means one per logical CPU.
    pub procs: usize,
    pub balance: bool,
}

impl Default for OnedConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            prior_size: 1000,
            n_ens: 1000,
            candidates: [1, 10],
            structure: CovarianceStructure::Full,
            em: EmOptions::default(),
            observation: -1.0,
            obs_variance: 2.2,
            burn_in: 100,
            stride: 5,
            serial_gaussian: MechanismSpec::Gaussian { scale: 0.25 },
            parallel_gaussian: MechanismSpec::Gaussian { scale: 0.5 },
            hmc: default_hmc(),
            weighted: true,
            histogram: Histogram::default(),
            procs: 0,
            balance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurConfig {
    pub width: usize,
    pub sigma: f64,
    pub boundary: Boundary,
    /// Wrap the blur in the pointwise saturation `z / (1 + |z|)`.
    pub saturate: bool,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self { width: 5, sigma: 1.5, boundary: Boundary::Reflect, saturate: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Fraction of the mean true intensity.
    pub level: f64,
    pub interpretation: NoiseInterpretation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorPoolConfig {
    pub pool: usize,
    pub subsample: usize,
    pub level: f64,
    pub interpretation: NoiseInterpretation,
}

impl Default for PriorPoolConfig {
    fn default() -> Self {
        Self { pool: 50, subsample: 30, level: 0.08, interpretation: NoiseInterpretation::Variance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RegularizerConfig {
    Identity,
    Laplacian { shift: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TikhonovConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub n_alpha: usize,
    pub regularizer: RegularizerConfig,
    pub solver: SolverOptions,
}

impl Default for TikhonovConfig {
    fn default() -> Self {
        Self {
            alpha_min: 1e-6,
            alpha_max: 1e2,
            n_alpha: 30,
            regularizer: RegularizerConfig::Identity,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeblurConfig {
    pub seed: u64,
    /// PGM image; relative paths resolve against the config file's directory.
    /// When absent the built-in 32×32 disk phantom is used.
    pub image: Option<PathBuf>,
    pub blur: BlurConfig,
    pub noise: NoiseConfig,
    pub prior: PriorPoolConfig,
    pub candidates: [usize; 2],
    pub structure: CovarianceStructure,
    pub em: EmOptions,
    pub n_ens: usize,
    pub burn_in: usize,
    pub stride: usize,
    pub hmc: MechanismSpec,
    pub gaussian: MechanismSpec,
    pub weighted: bool,
    pub tikhonov: TikhonovConfig,
    pub procs: usize,
    pub balance: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { level: 0.09, interpretation: NoiseInterpretation::Variance }
    }
}

impl Default for DeblurConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            image: None,
            blur: BlurConfig::default(),
            noise: NoiseConfig::default(),
            prior: PriorPoolConfig::default(),
            candidates: [1, 3],
            structure: CovarianceStructure::Diagonal,
            em: EmOptions::default(),
            n_ens: 100,
            burn_in: 100,
            stride: 5,
            hmc: default_hmc(),
            gaussian: MechanismSpec::Gaussian { scale: 2.38 * 2.38 },
            weighted: true,
            tikhonov: TikhonovConfig::default(),
            procs: 0,
            balance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// The 1D problem to benchmark; its sampler settings are reused.
    pub oned: OnedConfig,
    pub mechanism: MechanismSpec,
    pub p_values: Vec<usize>,
    pub repetitions: usize,
    /// Startup and per-word times for the communication terms.
    pub t_s: f64,
    pub t_w: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            oned: OnedConfig::default(),
            mechanism: default_hmc(),
            p_values: vec![1, 2, 4, 7, 8, 12],
            repetitions: 3,
            t_s: 0.0,
            t_w: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmFitConfig {
    pub seed: u64,
    /// CSV of samples, one row per member, optional header. When absent,
    /// `generate` points are drawn from the built-in 1D generating mixture.
    pub data: Option<PathBuf>,
    pub generate: usize,
    pub candidates: [usize; 2],
    pub structure: CovarianceStructure,
    pub em: EmOptions,
}

impl Default for EmFitConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            data: None,
            generate: 1000,
            candidates: [1, 10],
            structure: CovarianceStructure::Full,
            em: EmOptions::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: OnedConfig = parse_config("{}", "oned").unwrap();
        assert_eq!(c.n_ens, 1000);
        assert_eq!(c.obs_variance, 2.2);
    }

    #[test]
    fn unknown_keys_and_wrong_kind_rejected() {
        assert!(matches!(parse_config::<OnedConfig>(r#"{"n_ensemble": 3}"#, "oned"), Err(Error::Config(_))));
        assert!(matches!(parse_config::<OnedConfig>(r#"{"kind": "deblur"}"#, "oned"), Err(Error::Config(_))));
        let c: DeblurConfig = parse_config(r#"{"kind": "deblur", "noise": {"interpretation": "std"}}"#, "deblur").unwrap();
        assert_eq!(c.noise.interpretation, NoiseInterpretation::Std);
        assert_eq!(c.noise.level, 0.09);
    }

    #[test]
    fn mechanism_round_trip() {
        let c: OnedConfig =
            parse_config(r#"{"hmc": {"kind": "hmc", "steps": 10, "trajectory_length": 0.5}}"#, "oned").unwrap();
        assert_eq!(c.hmc, MechanismSpec::Hmc { steps: 10, trajectory_length: 0.5 });
    }
}
