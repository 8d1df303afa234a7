//! Recurrent regressor from per-epoch probe features to accuracy change.

mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureRecord;
use crate::kernel::{Dense, Graph, LstmLayer, ParamStore, Tensor, Var};
use crate::rng::{stream, tag};

pub use checkpoint::ESTIMATOR_FORMAT_VERSION;
pub use train::{train_estimator, TrainReport, TrainSpec};

/// Which per-epoch quantities feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureLayout {
    pub gd: bool,
    pub iu: bool,
    pub pd: bool,
    /// Values at the current epoch.
    pub current: bool,
    /// Change since the previous epoch.
    pub delta: bool,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        FeatureLayout::full()
    }
}

impl FeatureLayout {
    pub fn full() -> Self {
        FeatureLayout {
            gd: true,
            iu: true,
            pd: true,
            current: true,
            delta: true,
        }
    }

    pub fn with_groups(self, gd: bool, iu: bool, pd: bool) -> Self {
        FeatureLayout { gd, iu, pd, ..self }
    }

    pub fn with_parts(self, current: bool, delta: bool) -> Self {
        FeatureLayout { current, delta, ..self }
    }

    pub fn label(&self) -> String {
        let mut groups = Vec::new();
        if self.gd {
            groups.push("GD");
        }
        if self.iu {
            groups.push("IU");
        }
        if self.pd {
            groups.push("PD");
        }
        let parts = match (self.current, self.delta) {
            (true, true) => "Feat+dFeat",
            (true, false) => "Feat",
            (false, true) => "dFeat",
            (false, false) => "none",
        };
        format!("{}/{parts}", groups.join("+"))
    }

    pub fn input_dim(&self, num_classes: usize) -> usize {
        let per = usize::from(self.gd) + usize::from(self.iu) + if self.pd { num_classes } else { 0 };
        per * (usize::from(self.current) + usize::from(self.delta))
    }

    fn validate(&self) -> Result<()> {
        if !(self.gd || self.iu || self.pd) || !(self.current || self.delta) {
            return Err(Error::Config(format!("feature layout {} selects no inputs", self.label())));
        }
        Ok(())
    }

    pub fn extract(&self, r: &FeatureRecord, out: &mut Vec<f64>) {
        if self.current {
            if self.gd {
                out.push(r.gd);
            }
            if self.iu {
                out.push(r.iu);
            }
            if self.pd {
                out.extend_from_slice(&r.pd);
            }
        }
        if self.delta {
            if self.gd {
                out.push(r.dgd);
            }
            if self.iu {
                out.push(r.diu);
            }
            if self.pd {
                out.extend_from_slice(&r.dpd);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Body {
    /// Stacked LSTM layers over the epoch sequence.
    Recurrent,
    /// Per-epoch dense layers with no state.
    FeedForward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    pub body: Body,
    pub layers: usize,
    pub hidden: usize,
    pub dense: usize,
    pub layout: FeatureLayout,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec {
            body: Body::Recurrent,
            layers: 2,
            hidden: 200,
            dense: 20,
            layout: FeatureLayout::full(),
        }
    }
}

/// Per-coordinate input standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        InputNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every step of every sequence; constant coordinates
    /// get unit scale.
    pub fn fit(layout: &FeatureLayout, num_classes: usize, episodes: &[&[FeatureRecord]]) -> Self {
        let dim = layout.input_dim(num_classes);
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        let mut buf = Vec::with_capacity(dim);
        for r in episodes.iter().flat_map(|e| e.iter()) {
            buf.clear();
            layout.extract(r, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n as f64 - m * m).max(0.0).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        InputNorm { mean, std }
    }
}

#[derive(Clone, Debug)]
enum Layers {
    Recurrent(Vec<LstmLayer>),
    FeedForward(Vec<Dense>),
}

/// The accuracy-change estimator.
#[derive(Clone, Debug)]
pub struct EstimatorNet {
    spec: EstimatorSpec,
    num_classes: usize,
    norm: InputNorm,
    fingerprint: String,
    store: ParamStore,
    layers: Layers,
    fc0: Dense,
    fc1: Dense,
}

/// Normalized inputs and L1 weights for a padded batch of sequences.
pub(crate) struct Batch {
    pub size: usize,
    pub steps: usize,
    pub lengths: Vec<usize>,
    /// Per step, a `[size, dim]` row-major block.
    pub inputs: Vec<Vec<f64>>,
    /// Per step, the target of each sequence (0 past its end).
    pub targets: Vec<Vec<f64>>,
    /// Per step, the loss weight of each sequence (0 at padding and epoch 0).
    pub weights: Vec<Vec<f64>>,
}

impl EstimatorNet {
    pub fn new(spec: &EstimatorSpec, num_classes: usize, seed: u64) -> Result<Self> {
        spec.layout.validate()?;
        if spec.layers == 0 || spec.hidden == 0 || spec.dense == 0 {
            return Err(Error::Config("estimator layers, hidden and dense sizes must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config("estimator needs at least two classes".into()));
        }
        let dim = spec.layout.input_dim(num_classes);
        let mut rng = stream(seed, &[tag("estimator-init")]);
        let mut store = ParamStore::new();
        let layers = match spec.body {
            Body::Recurrent => Layers::Recurrent(
                (0..spec.layers)
                    .map(|i| {
                        let inputs = if i == 0 { dim } else { spec.hidden };
                        LstmLayer::new(&mut store, &format!("lstm{i}"), inputs, spec.hidden, &mut rng)
                    })
                    .collect(),
            ),
            Body::FeedForward => Layers::FeedForward(
                (0..spec.layers)
                    .map(|i| {
                        let inputs = if i == 0 { dim } else { spec.hidden };
                        Dense::new(&mut store, &format!("mlp{i}"), inputs, spec.hidden, &mut rng)
                    })
                    .collect(),
            ),
        };
        let fc0 = Dense::new(&mut store, "fc0", spec.hidden, spec.dense, &mut rng);
        let fc1 = Dense::new(&mut store, "fc1", spec.dense, 1, &mut rng);
        Ok(EstimatorNet {
            spec: spec.clone(),
            num_classes,
            norm: InputNorm::identity(dim),
            fingerprint: String::new(),
            store,
            layers,
            fc0,
            fc1,
        })
    }

    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layout.input_dim(self.num_classes)
    }

    pub fn norm(&self) -> &InputNorm {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: InputNorm) -> Result<()> {
        let dim = self.input_dim();
        if norm.mean.len() != dim || norm.std.len() != dim || norm.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid(format!("input normalization must have {dim} positive scales")));
        }
        self.norm = norm;
        Ok(())
    }

    /// Identifier of the corpus the net was trained on.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn set_fingerprint(&mut self, f: impl Into<String>) {
        self.fingerprint = f.into();
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_sequence(&self, records: &[FeatureRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::invalid("empty feature sequence"));
        }
        for (e, r) in records.iter().enumerate() {
            if r.epoch != e {
                return Err(Error::invalid(format!("feature record {e} has epoch {}", r.epoch)));
            }
            if r.pd.len() != self.num_classes || r.dpd.len() != self.num_classes {
                return Err(Error::Shape {
                    op: "estimate_sequence",
                    lhs: vec![r.pd.len()],
                    rhs: vec![self.num_classes],
                });
            }
        }
        Ok(())
    }

    pub(crate) fn batch(&self, episodes: &[&[FeatureRecord]], with_targets: bool) -> Result<Batch> {
        let size = episodes.len();
        let dim = self.input_dim();
        let steps = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut inputs = vec![vec![0.0; size * dim]; steps];
        let mut targets = vec![vec![0.0; size]; steps];
        let mut weights = vec![vec![0.0; size]; steps];
        let mut buf = Vec::with_capacity(dim);
        for (b, ep) in episodes.iter().enumerate() {
            self.check_sequence(ep)?;
            let scored = (ep.len() - 1).max(1) as f64 * size as f64;
            for (t, r) in ep.iter().enumerate() {
                buf.clear();
                self.spec.layout.extract(r, &mut buf);
                let row = &mut inputs[t][b * dim..(b + 1) * dim];
                for (j, v) in buf.iter().enumerate() {
                    row[j] = (v - self.norm.mean[j]) / self.norm.std[j];
                }
                if with_targets {
                    targets[t][b] = r
                        .delta_acc
                        .ok_or_else(|| Error::invalid(format!("record {t} lacks a ground-truth accuracy change")))?;
                    if t > 0 {
                        weights[t][b] = 1.0 / scored;
                    }
                }
            }
        }
        Ok(Batch {
            size,
            steps,
            lengths: episodes.iter().map(|e| e.len()).collect(),
            inputs,
            targets,
            weights,
        })
    }

    /// Raw outputs `[size, 1]` for steps `1..steps`; index 0 of the result is
    /// step 1.
    pub(crate) fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Vec<Var>> {
        let dim = self.input_dim();
        let mut outs = Vec::with_capacity(batch.steps.saturating_sub(1));
        let fc = |g: &mut Graph, h: Var| -> Result<Var> {
            let z = self.fc0.forward(g, &self.store, h)?;
            let z = g.relu(z);
            self.fc1.forward(g, &self.store, z)
        };
        match &self.layers {
            Layers::Recurrent(layers) => {
                let bound: Vec<_> = layers.iter().map(|l| l.bind(g, &self.store)).collect();
                let mut state: Vec<(Var, Var)> = bound.iter().map(|b| b.zero_state(g, batch.size)).collect();
                for t in 0..batch.steps {
                    let mut x = g.input(Tensor::new(vec![batch.size, dim], batch.inputs[t].clone())?);
                    for (l, b) in bound.iter().enumerate() {
                        let (h, c) = b.step(g, x, state[l].0, state[l].1)?;
                        state[l] = (h, c);
                        x = h;
                    }
                    if t > 0 {
                        outs.push(fc(g, x)?);
                    }
                }
            }
            Layers::FeedForward(layers) => {
                for t in 1..batch.steps {
                    let mut x = g.input(Tensor::new(vec![batch.size, dim], batch.inputs[t].clone())?);
                    for l in layers {
                        x = l.forward(g, &self.store, x)?;
                        x = g.relu(x);
                    }
                    outs.push(fc(g, x)?);
                }
            }
        }
        Ok(outs)
    }

    /// Weighted L1 over scored steps; each sequence contributes the mean of
    /// its absolute errors, averaged over the batch.
    pub(crate) fn loss(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let outs = self.forward(g, batch)?;
        let mut total: Option<Var> = None;
        for (i, out) in outs.into_iter().enumerate() {
            let t = i + 1;
            let target = g.input(Tensor::new(vec![batch.size, 1], batch.targets[t].clone())?);
            let w = g.input(Tensor::new(vec![batch.size, 1], batch.weights[t].clone())?);
            let d = g.sub(out, target)?;
            let d = g.abs(d);
            let d = g.mul(d, w)?;
            let s = g.sum(d);
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        match total {
            Some(v) => Ok(v),
            None => Ok(g.input(Tensor::scalar(0.0))),
        }
    }

    /// Clamped estimates for a batch; entry 0 of every sequence is 0.
    pub fn estimate_batch(&self, episodes: &[&[FeatureRecord]]) -> Result<Vec<Vec<f64>>> {
        let batch = self.batch(episodes, false)?;
        let mut g = Graph::new();
        let outs = self.forward(&mut g, &batch)?;
        Ok((0..batch.size)
            .map(|b| {
                let mut seq = vec![0.0];
                seq.extend((1..batch.lengths[b]).map(|t| g.value(outs[t - 1]).data()[b].clamp(-1.0, 1.0)));
                seq
            })
            .collect())
    }

    /// Estimated accuracy change at every epoch of one sequence.
    pub fn estimate_sequence(&self, records: &[FeatureRecord]) -> Result<Vec<f64>> {
        Ok(self.estimate_batch(&[records])?.remove(0))
    }

    /// Mean over sequences of the mean absolute error at epochs `1..`.
    pub fn mean_abs_error(&self, episodes: &[&[FeatureRecord]]) -> Result<f64> {
        if episodes.is_empty() {
            return Err(Error::invalid("mean_abs_error: no sequences"));
        }
        let mut total = 0.0;
        for chunk in episodes.chunks(64) {
            let est = self.estimate_batch(chunk)?;
            for (ep, e) in chunk.iter().zip(est) {
                let n = ep.len().saturating_sub(1);
                if n == 0 {
                    continue;
                }
                let mut s = 0.0;
                for t in 1..ep.len() {
                    let truth = ep[t]
                        .delta_acc
                        .ok_or_else(|| Error::invalid(format!("record {t} lacks a ground-truth accuracy change")))?;
                    s += (truth - e[t]).abs();
                }
                total += s / n as f64;
            }
        }
        Ok(total / episodes.len() as f64)
    }
}
