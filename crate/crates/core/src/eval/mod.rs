//! Baseline estimators, the similarity score, and evaluation reports.

mod report;
mod run;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::features::{mean_max_confidence, PredictionMatrix};

pub use report::{
    build_report, write_report, Curve, DegradationSummary, ImbalanceSummary, MethodSummary, Report, ReportRow, Summary,
    FIXED_EPOCH,
};
pub use run::{run_eval_cells, EvalConfig, EvalInputs, EvalRun};

/// Estimated (or true) accuracy change per epoch for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationTrace {
    pub method: String,
    pub values: Vec<f64>,
}

impl EstimationTrace {
    pub fn new(method: impl Into<String>, values: Vec<f64>) -> Self {
        EstimationTrace {
            method: method.into(),
            values,
        }
    }

    /// Change of a per-epoch level relative to epoch 0.
    pub fn from_levels(method: impl Into<String>, levels: &[f64]) -> Result<Self> {
        let first = *levels
            .first()
            .ok_or_else(|| Error::invalid("trace needs at least one epoch"))?;
        Ok(Self::new(method, levels.iter().map(|a| a - first).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    /// Absolute error at epochs `1..=T`.
    pub errors: Vec<f64>,
}

pub fn tgtlabel_trace(accuracies: &[f64]) -> Result<EstimationTrace> {
    EstimationTrace::from_levels("TgtLabel", accuracies)
}

/// Accuracy change on labeled hold-out source data, used as the estimate.
pub fn srclabel_trace(matrices: &[PredictionMatrix], holdout_labels: &[usize]) -> Result<EstimationTrace> {
    let acc = matrices
        .iter()
        .map(|m| m.accuracy(holdout_labels))
        .collect::<Result<Vec<_>>>()?;
    EstimationTrace::from_levels("SrcLabel", &acc)
}

/// Change of the mean top-class confidence on the validation data.
pub fn softmax_score_trace(matrices: &[PredictionMatrix]) -> Result<EstimationTrace> {
    let s = matrices.iter().map(mean_max_confidence).collect::<Result<Vec<_>>>()?;
    EstimationTrace::from_levels("SoftmaxScore", &s)
}

/// `1 - mean_{e >= 1} |truth_e - clamp(estimate_e, -1, 1)|`; 1 when there
/// is no epoch after the first.
pub fn similarity(truth: &EstimationTrace, estimate: &EstimationTrace) -> Result<SimilarityScore> {
    if truth.values.len() != estimate.values.len() {
        return Err(Error::invalid(format!(
            "similarity: {} has {} epochs, {} has {}",
            truth.method,
            truth.values.len(),
            estimate.method,
            estimate.values.len()
        )));
    }
    let errors: Vec<f64> = truth
        .values
        .iter()
        .zip(&estimate.values)
        .skip(1)
        .map(|(t, e)| (t - e.clamp(-1.0, 1.0)).abs())
        .collect();
    let value = if errors.is_empty() {
        1.0
    } else {
        1.0 - errors.iter().sum::<f64>() / errors.len() as f64
    };
    Ok(SimilarityScore { value, errors })
}

fn window_key(w: &[f64]) -> Vec<u64> {
    w.iter().map(|v| v.to_bits()).collect()
}

/// Rejects a hold-out set sharing any window with a training set.
pub fn ensure_disjoint(holdout: &DomainDataset, training: &[&DomainDataset]) -> Result<()> {
    let held: HashSet<Vec<u64>> = (0..holdout.len()).map(|i| window_key(holdout.window(i))).collect();
    for d in training {
        if let Some(i) = (0..d.len()).find(|&i| held.contains(&window_key(d.window(i)))) {
            return Err(Error::invalid(format!(
                "hold-out data overlaps training domain {} at instance {i}",
                d.domain_id()
            )));
        }
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("pearson: need two equal-length series of at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
