use serde::{Deserialize, Serialize};

use crate::data::Unlabeled;
use crate::error::{Error, Result};
use crate::features::PredictionMatrix;
use crate::kernel::{BatchNorm1d, Conv1d, Dense, Graph, Mode, ParamStore, RunningUpdate, Tensor, Var};
use crate::rng::{stream, tag};

/// Layer sizes of the convolutional classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub dense: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            conv_channels: vec![8, 16, 16],
            kernel: 5,
            stride: 2,
            dense: 32,
        }
    }
}

impl ClassifierSpec {
    fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("classifier needs at least one conv block with nonzero channels".into()));
        }
        if self.kernel == 0 || self.stride == 0 || self.dense == 0 {
            return Err(Error::Config("classifier kernel, stride and dense width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv1d,
    bn: BatchNorm1d,
}

/// Conv feature extractor (`fe.*`) plus a two-layer dense head (`head.*`).
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    spec: ClassifierSpec,
    channels: usize,
    length: usize,
    num_classes: usize,
    feature_dim: usize,
    store: ParamStore,
    blocks: Vec<Block>,
    hidden: Dense,
    out: Dense,
}

/// Output of one forward pass.
pub struct Forward {
    pub features: Var,
    pub logits: Var,
    pub updates: Vec<RunningUpdate>,
}

const PREDICT_CHUNK: usize = 256;

impl ClassifierNet {
    pub fn new(spec: &ClassifierSpec, channels: usize, length: usize, num_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if channels == 0 || num_classes < 2 {
            return Err(Error::invalid("classifier needs at least one channel and two classes"));
        }
        let mut rng = stream(seed, &[tag("classifier-init")]);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let (mut c_in, mut len) = (channels, length);
        let pad = spec.kernel / 2;
        for (i, &c_out) in spec.conv_channels.iter().enumerate() {
            if len + 2 * pad < spec.kernel {
                return Err(Error::Config(format!("window length {length} too short for {} conv blocks", i + 1)));
            }
            let conv = Conv1d::new(&mut store, &format!("fe.conv{i}"), c_in, c_out, spec.kernel, spec.stride, pad, &mut rng);
            let bn = BatchNorm1d::new(&mut store, &format!("fe.bn{i}"), c_out);
            blocks.push(Block { conv, bn });
            len = (len + 2 * pad - spec.kernel) / spec.stride + 1;
            c_in = c_out;
        }
        let feature_dim = c_in * len;
        let hidden = Dense::new(&mut store, "head.fc0", feature_dim, spec.dense, &mut rng);
        let out = Dense::new(&mut store, "head.fc1", spec.dense, num_classes, &mut rng);
        Ok(ClassifierNet {
            spec: spec.clone(),
            channels,
            length,
            num_classes,
            feature_dim,
            store,
            blocks,
            hidden,
            out,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Width of the flattened feature-extractor output.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Places a batch of flattened windows into the graph as `[n, C, L]`.
    pub fn input(&self, g: &mut Graph, windows: Vec<f64>) -> Result<Var> {
        let per = self.channels * self.length;
        if per == 0 || windows.len() % per != 0 {
            return Err(Error::Shape {
                op: "classifier_input",
                lhs: vec![windows.len()],
                rhs: vec![self.channels, self.length],
            });
        }
        let n = windows.len() / per;
        Ok(g.input(Tensor::new(vec![n, self.channels, self.length], windows)?))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Forward> {
        let mut updates = Vec::new();
        let mut h = x;
        for b in &self.blocks {
            h = b.conv.forward(g, &self.store, h)?;
            h = b.bn.forward(g, &self.store, h, mode, &mut updates)?;
            h = g.relu(h);
        }
        let features = g.flatten(h)?;
        let logits = self.head(g, features)?;
        Ok(Forward {
            features,
            logits,
            updates,
        })
    }

    pub fn head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let h = self.hidden.forward(g, &self.store, features)?;
        let h = g.relu(h);
        self.out.forward(g, &self.store, h)
    }

    /// Eval-mode softmax outputs; never touches parameters or statistics.
    pub fn predict(&self, data: Unlabeled<'_>) -> Result<PredictionMatrix> {
        Ok(self.predict_with_features(data)?.0)
    }

    /// Eval-mode predictions together with the flattened feature vectors.
    pub fn predict_with_features(&self, data: Unlabeled<'_>) -> Result<(PredictionMatrix, Vec<f64>)> {
        self.check_windows(data.channels(), data.length())?;
        let n = data.len();
        let mut probs = Vec::with_capacity(n * self.num_classes);
        let mut feats = Vec::with_capacity(n * self.feature_dim);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let x = self.input(&mut g, data.gather(&idx))?;
            let f = self.forward(&mut g, x, Mode::Eval)?;
            let p = g.softmax(f.logits)?;
            probs.extend_from_slice(g.value(p).data());
            feats.extend_from_slice(g.value(f.features).data());
            start = end;
        }
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("classifier outputs".into()));
        }
        Ok((PredictionMatrix::new(n, self.num_classes, probs)?, feats))
    }

    pub fn check_windows(&self, channels: usize, length: usize) -> Result<()> {
        if channels != self.channels || length != self.length {
            return Err(Error::Shape {
                op: "classifier_windows",
                lhs: vec![channels, length],
                rhs: vec![self.channels, self.length],
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.to_bytes()
    }

    /// Loads parameters written by [`to_bytes`](Self::to_bytes) into a net of
    /// identical architecture.
    pub fn load_bytes(&mut self, mut bytes: &[u8]) -> Result<()> {
        self.store.load_from(&mut bytes)
    }
}
