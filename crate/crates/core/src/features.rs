//! Information-theoretic probes of a classifier's predictions on unlabeled
//! validation data.
//!
//! All entropies are in nats and nonnegative: `gd = H(mean_x p(.|x))`,
//! `iu = mean_x H(p(.|x))`, and the mutual-information estimate is
//! `gd - iu >= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::LOG_FLOOR;

/// Row-stochastic `N x K` matrix of predicted class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    rows: usize,
    classes: usize,
    probs: Vec<f64>,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl PredictionMatrix {
    pub fn new(rows: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("prediction matrix needs at least one class"));
        }
        if probs.len() != rows * classes {
            return Err(Error::Shape {
                op: "prediction_matrix",
                lhs: vec![rows, classes],
                rhs: vec![probs.len()],
            });
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("prediction row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("prediction row {i} sums to {s}")));
            }
        }
        Ok(PredictionMatrix { rows, classes, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("prediction rows differ in length"));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn argmax(&self, i: usize) -> usize {
        // First maximal index, so ties resolve deterministically.
        let row = self.row(i);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best
    }

    /// Fraction of rows whose argmax equals the label.
    pub fn accuracy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.rows {
            return Err(Error::invalid(format!(
                "accuracy: {} labels for {} predictions",
                labels.len(),
                self.rows
            )));
        }
        if self.rows == 0 {
            return Err(Error::invalid("accuracy: empty validation set"));
        }
        let hits = (0..self.rows).filter(|&i| self.argmax(i) == labels[i]).count();
        Ok(hits as f64 / self.rows as f64)
    }

    fn nonempty(&self, what: &str) -> Result<()> {
        if self.rows == 0 {
            Err(Error::invalid(format!("{what}: prediction matrix has no rows")))
        } else {
            Ok(())
        }
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Column mean of the predictions.
pub fn prediction_distribution(p: &PredictionMatrix) -> Result<Vec<f64>> {
    p.nonempty("prediction_distribution")?;
    let mut mean = vec![0.0; p.classes];
    for row in p.probs.chunks_exact(p.classes) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let n = p.rows as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Entropy of the mean prediction.
pub fn global_diversity(p: &PredictionMatrix) -> Result<f64> {
    Ok(entropy(&prediction_distribution(p)?).max(0.0))
}

/// Mean per-row prediction entropy.
pub fn individual_uncertainty(p: &PredictionMatrix) -> Result<f64> {
    p.nonempty("individual_uncertainty")?;
    let total: f64 = p.probs.chunks_exact(p.classes).map(entropy).sum();
    Ok((total / p.rows as f64).max(0.0))
}

/// Monte Carlo estimate of the mutual information between inputs and
/// predictions, `gd - iu`.
pub fn mutual_info_estimate(p: &PredictionMatrix) -> Result<f64> {
    Ok(global_diversity(p)? - individual_uncertainty(p)?)
}

/// Mean over rows of the largest class probability.
pub fn mean_max_confidence(p: &PredictionMatrix) -> Result<f64> {
    p.nonempty("mean_max_confidence")?;
    let total: f64 = p
        .probs
        .chunks_exact(p.classes)
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / p.rows as f64)
}

/// Features of one adaptation epoch plus their change since the previous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub epoch: usize,
    pub gd: f64,
    pub iu: f64,
    pub pd: Vec<f64>,
    pub dgd: f64,
    pub diu: f64,
    pub dpd: Vec<f64>,
    /// Ground-truth accuracy at this epoch, when labels were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    /// `acc[e] - acc[0]`, when labels were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_acc: Option<f64>,
}

impl FeatureRecord {
    pub fn classes(&self) -> usize {
        self.pd.len()
    }
}

/// Builds one record per epoch. Deltas are zero at epoch 0.
pub fn build_feature_sequence(matrices: &[PredictionMatrix], accuracies: Option<&[f64]>) -> Result<Vec<FeatureRecord>> {
    if matrices.is_empty() {
        return Err(Error::invalid("build_feature_sequence: no prediction matrices"));
    }
    if let Some(a) = accuracies {
        if a.len() != matrices.len() {
            return Err(Error::invalid(format!(
                "build_feature_sequence: {} accuracies for {} matrices",
                a.len(),
                matrices.len()
            )));
        }
    }
    let k = matrices[0].classes();
    let mut out: Vec<FeatureRecord> = Vec::with_capacity(matrices.len());
    for (e, m) in matrices.iter().enumerate() {
        if m.classes() != k {
            return Err(Error::invalid(format!("epoch {e}: {} classes, expected {k}", m.classes())));
        }
        let gd = global_diversity(m)?;
        let iu = individual_uncertainty(m)?;
        let pd = prediction_distribution(m)?;
        let (dgd, diu, dpd) = match out.last() {
            Some(prev) => (
                gd - prev.gd,
                iu - prev.iu,
                pd.iter().zip(&prev.pd).map(|(a, b)| a - b).collect(),
            ),
            None => (0.0, 0.0, vec![0.0; k]),
        };
        let acc = accuracies.map(|a| a[e]);
        let delta_acc = accuracies.map(|a| a[e] - a[0]);
        out.push(FeatureRecord {
            epoch: e,
            gd,
            iu,
            pd,
            dgd,
            diu,
            dpd,
            acc,
            delta_acc,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(rows: &[&[f64]]) -> PredictionMatrix {
        PredictionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_one_hot_rows() {
        let p = pm(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(global_diversity(&p).unwrap(), 0.0);
        assert_eq!(individual_uncertainty(&p).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_covering_all_classes() {
        let k = 4;
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..k).map(|j| if i % k == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let p = PredictionMatrix::from_rows(&rows).unwrap();
        let ln_k = (k as f64).ln();
        assert!((global_diversity(&p).unwrap() - ln_k).abs() < 1e-15);
        assert_eq!(individual_uncertainty(&p).unwrap(), 0.0);
        assert!((mutual_info_estimate(&p).unwrap() - ln_k).abs() < 1e-15);
    }

    #[test]
    fn uniform_rows_have_no_information() {
        let p = pm(&[&[0.25; 4], &[0.25; 4]]);
        assert!((individual_uncertainty(&p).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(mutual_info_estimate(&p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_class_pair() {
        let p = pm(&[&[0.8, 0.2], &[0.2, 0.8]]);
        assert!((global_diversity(&p).unwrap() - 0.693147).abs() < 1e-6);
        assert!((individual_uncertainty(&p).unwrap() - 0.500402).abs() < 1e-6);
        assert!((mutual_info_estimate(&p).unwrap() - 0.192745).abs() < 1e-6);
        assert_eq!(prediction_distribution(&p).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_row_distribution_is_the_row() {
        let p = pm(&[&[0.1, 0.7, 0.2]]);
        assert_eq!(prediction_distribution(&p).unwrap(), vec![0.1, 0.7, 0.2]);
    }

    #[test]
    fn empty_matrix_rejected() {
        let p = PredictionMatrix::new(0, 3, vec![]).unwrap();
        assert!(global_diversity(&p).is_err());
        assert!(individual_uncertainty(&p).is_err());
        assert!(prediction_distribution(&p).is_err());
    }

    #[test]
    fn invalid_rows_rejected() {
        assert!(PredictionMatrix::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(PredictionMatrix::from_rows(&[vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn sequence_deltas_and_truth() {
        let a = pm(&[&[0.8, 0.2], &[0.3, 0.7]]);
        let b = pm(&[&[0.6, 0.4], &[0.1, 0.9]]);
        let recs = build_feature_sequence(&[a.clone(), a.clone(), b], Some(&[0.6, 0.7, 0.5])).unwrap();
        assert_eq!((recs[0].dgd, recs[0].diu), (0.0, 0.0));
        assert_eq!(recs[1].dgd, 0.0);
        assert_eq!(recs[1].diu, 0.0);
        assert!(recs[1].dpd.iter().all(|&v| v == 0.0));
        let truth: Vec<f64> = recs.iter().map(|r| r.delta_acc.unwrap()).collect();
        assert_eq!(truth[0], 0.0);
        assert!((truth[1] - 0.1).abs() < 1e-12);
        assert!((truth[2] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = pm(&[&[0.5, 0.5]]);
        assert!(build_feature_sequence(&[a], Some(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let p = pm(&[&[0.8, 0.2], &[0.3, 0.7], &[0.5, 0.5]]);
        assert!((p.accuracy(&[0, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }
}
