use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` from their accumulated gradients.
    /// Gradients are left in place; call [`ParamStore::zero_grad`] after.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for &id in params {
                    let (w, g) = store.value_and_grad_mut(id);
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= self.lr * (g + self.weight_decay * *w);
                    }
                }
            }
            OptimizerKind::Adam => {
                let max = params.iter().map(|p| p.index() + 1).max().unwrap_or(0);
                if self.first.len() < max {
                    self.first.resize(max, Vec::new());
                    self.second.resize(max, Vec::new());
                }
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for &id in params {
                    let (w, g) = store.value_and_grad_mut(id);
                    let m = &mut self.first[id.index()];
                    let v = &mut self.second[id.index()];
                    if m.len() != w.len() {
                        *m = vec![0.0; w.len()];
                        *v = vec![0.0; w.len()];
                    }
                    for j in 0..w.len() {
                        let gj = g[j] + self.weight_decay * w[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        w[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Rescales gradients of `params` so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, params: &[ParamId], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .map(|&id| store.grad(id).iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for &id in params {
            store.grad_mut(id).iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
