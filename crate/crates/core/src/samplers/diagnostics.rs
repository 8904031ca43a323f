use serde::Serialize;

use super::ChainResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    pub acceptance_rate: f64,
    /// Per coordinate, autocorrelation at lags `0..=max_lag`; `None` for a constant coordinate.
    pub autocorrelation: Vec<Option<Vec<f64>>>,
    /// Per coordinate effective sample size; `None` for a constant coordinate.
    pub ess: Vec<Option<f64>>,
}

/// Lag-`k` autocorrelation, or `None` if the series has zero variance.
pub fn autocorrelation(series: &[f64], lag: usize) -> Option<f64> {
    let n = series.len();
    if lag >= n {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|v| (v - mean).powi(2)).sum();
    if var <= 0.0 {
        return None;
    }
    let cov: f64 = (0..n - lag).map(|t| (series[t] - mean) * (series[t + lag] - mean)).sum();
    Some(cov / var)
}

/// Effective sample size by Geyer's initial positive sequence estimator.
pub fn effective_sample_size(series: &[f64]) -> Option<f64> {
    let n = series.len();
    if n < 2 {
        return None;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let var: f64 = centred.iter().map(|v| v * v).sum();
    if var <= 0.0 {
        return None;
    }
    let rho = |lag: usize| -> f64 {
        (0..n - lag).map(|t| centred[t] * centred[t + lag]).sum::<f64>() / var
    };
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    Some(n as f64 / tau.max(1.0 / n as f64))
}

pub fn chain_diagnostics(result: &ChainResult, max_lag: usize) -> Result<ChainDiagnostics> {
    let n = result.samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let dim = result.samples[0].len();
    let mut acf = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for k in 0..dim {
        let series: Vec<f64> = result.samples.iter().map(|s| s[k]).collect();
        acf.push((0..=max_lag.min(n - 1)).map(|l| autocorrelation(&series, l)).collect());
        ess.push(effective_sample_size(&series));
    }
    Ok(ChainDiagnostics { acceptance_rate: result.acceptance_rate(), autocorrelation: acf, ess })
}
