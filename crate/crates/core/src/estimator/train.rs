use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EstimatorNet, EstimatorSpec, InputNorm};
use crate::error::{Error, Result};
use crate::features::FeatureRecord;
use crate::kernel::{clip_grad_norm, Graph, Optimizer};
use crate::rng::{derive_seed, stream, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Share of sequences held out for checkpoint selection.
    pub val_fraction: f64,
    /// Independent initializations; the one with the lowest validation
    /// error is kept.
    pub restarts: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 50,
            learning_rate: 1e-5,
            batch_size: 16,
            clip_norm: 5.0,
            val_fraction: 0.2,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_train: usize,
    pub n_val: usize,
    /// Indices (into the input corpus) of the held-out sequences.
    pub val_indices: Vec<usize>,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    /// Mean step loss during each epoch.
    pub train_loss: Vec<f64>,
    /// Clamped-output validation error after each epoch.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Which initialization was kept, and the best validation error of each.
    #[serde(default)]
    pub restart: usize,
    #[serde(default)]
    pub restart_val_losses: Vec<f64>,
}

/// SHA-256 over every record of every sequence, in order.
pub fn corpus_fingerprint(episodes: &[&[FeatureRecord]]) -> String {
    let mut h = Sha256::new();
    for ep in episodes {
        h.update((ep.len() as u64).to_le_bytes());
        for r in ep.iter() {
            let scalars = [r.gd, r.iu, r.dgd, r.diu, r.delta_acc.unwrap_or(f64::NAN)];
            for v in scalars.iter().chain(&r.pd).chain(&r.dpd) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Splits the corpus, fits input statistics on the training part, and
/// trains with L1 loss, keeping the parameters of the best validation epoch
/// over all restarts. The split depends only on `seed`, so estimators of
/// different shapes trained with one seed are selected on the same data.
pub fn train_estimator(
    episodes: &[&[FeatureRecord]],
    num_classes: usize,
    net_spec: &EstimatorSpec,
    spec: &TrainSpec,
    seed: u64,
) -> Result<(EstimatorNet, TrainReport)> {
    if episodes.len() < 2 {
        return Err(Error::invalid(format!(
            "estimator training needs at least 2 sequences, got {}",
            episodes.len()
        )));
    }
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {} outside (0, 1)", spec.val_fraction)));
    }
    if spec.batch_size == 0 || !(spec.clip_norm > 0.0) || spec.restarts == 0 {
        return Err(Error::Config("batch size, clip norm and restarts must be positive".into()));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut stream(seed, &[tag("estimator-split")]));
    let n_val = ((spec.val_fraction * episodes.len() as f64).round() as usize).clamp(1, episodes.len() - 1);
    let mut val_indices = order[..n_val].to_vec();
    val_indices.sort_unstable();
    let train_idx = order[n_val..].to_vec();
    let train: Vec<&[FeatureRecord]> = train_idx.iter().map(|&i| episodes[i]).collect();
    let val: Vec<&[FeatureRecord]> = val_indices.iter().map(|&i| episodes[i]).collect();

    let mut best: Option<(EstimatorNet, TrainReport)> = None;
    let mut losses = Vec::with_capacity(spec.restarts);
    for r in 0..spec.restarts {
        let init = if r == 0 { seed } else { derive_seed(seed, &[tag("restart"), r as u64]) };
        let (mut net, mut report) = train_once(&train, &val, num_classes, net_spec, spec, init)?;
        net.set_fingerprint(corpus_fingerprint(episodes));
        losses.push(report.best_val_loss);
        if best.as_ref().is_none_or(|(_, b)| report.best_val_loss < b.best_val_loss) {
            report.restart = r;
            report.val_indices = val_indices.clone();
            best = Some((net, report));
        }
    }
    let (net, mut report) = best.expect("at least one restart");
    report.restart_val_losses = losses;
    Ok((net, report))
}

fn train_once(
    train: &[&[FeatureRecord]],
    val: &[&[FeatureRecord]],
    num_classes: usize,
    net_spec: &EstimatorSpec,
    spec: &TrainSpec,
    seed: u64,
) -> Result<(EstimatorNet, TrainReport)> {
    let mut net = EstimatorNet::new(net_spec, num_classes, seed)?;
    net.set_norm(InputNorm::fit(&net_spec.layout, num_classes, train))?;
    let ids = net.store().trainable_ids();
    let mut opt = Optimizer::adam(spec.learning_rate)?;

    let initial_train_loss = net.mean_abs_error(train)?;
    let initial_val_loss = net.mean_abs_error(val)?;
    let mut best = (0, initial_val_loss, net.store().clone());
    let mut train_loss = Vec::with_capacity(spec.epochs);
    let mut val_loss = Vec::with_capacity(spec.epochs);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=spec.epochs {
        idx.shuffle(&mut stream(seed, &[tag("estimator-epoch"), epoch as u64]));
        let mut total = 0.0;
        for chunk in idx.chunks(spec.batch_size) {
            let eps: Vec<&[FeatureRecord]> = chunk.iter().map(|&i| train[i]).collect();
            let batch = net.batch(&eps, true)?;
            let mut g = Graph::new();
            let loss = net.loss(&mut g, &batch)?;
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Numerical(format!("estimator loss at epoch {epoch}")));
            }
            total += l * chunk.len() as f64;
            let store = net.store_mut();
            g.backward(loss, store)?;
            clip_grad_norm(store, &ids, spec.clip_norm);
            opt.step(store, &ids);
            store.zero_grad();
        }
        train_loss.push(total / train.len() as f64);
        let v = net.mean_abs_error(&val)?;
        val_loss.push(v);
        if v < best.1 {
            best = (epoch, v, net.store().clone());
        }
    }
    let (best_epoch, best_val_loss, params) = best;
    net.store_mut().copy_values_from(&params);
    Ok((
        net,
        TrainReport {
            n_train: train.len(),
            n_val: val.len(),
            val_indices: Vec::new(),
            initial_train_loss,
            initial_val_loss,
            train_loss,
            val_loss,
            best_epoch,
            best_val_loss,
            restart: 0,
            restart_val_losses: Vec::new(),
        },
    ))
}
