//! Count-level evaluation metrics: mean absolute error, root mean squared
//! error, and the ground-truth-normalized absolute error that skips
//! zero-count scenes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::kahan_sum;

/// Aggregated counting metrics. Field order is fixed; serializing the same
/// values always yields byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    /// Root of the mean squared count error.
    pub mse: f64,
    /// Mean of |C−C*|/C* over scenes with C* > 0; absent when there are none.
    pub nae: Option<f64>,
    pub n_samples: usize,
    /// Scenes excluded from NAE by the zero-count rule.
    pub n_excluded: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Computes the three counting metrics over paired predicted/true counts.
pub fn counting_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    let n = pred.len() as f64;
    let mae = kahan_sum(pred.iter().zip(truth).map(|(p, t)| (p - t).abs())) / n;
    let mse = (kahan_sum(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t))) / n).sqrt();
    let included: Vec<f64> = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t > 0.0)
        .map(|(p, &t)| (p - t).abs() / t)
        .collect();
    let n_excluded = pred.len() - included.len();
    let nae = if included.is_empty() {
        None
    } else {
        Some(kahan_sum(included.iter().copied()) / included.len() as f64)
    };
    Ok(MetricsReport {
        mae,
        mse,
        nae,
        n_samples: pred.len(),
        n_excluded,
    })
}
