//! Parameterized layers built on [`Graph`] ops.

use rand::Rng as _;

use super::graph::{BatchStats, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic update recorded by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    layer: BatchNorm1d,
    stats: BatchStats,
}

impl RunningUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        self.layer.update_running(store, &self.stats);
    }
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Kaiming-uniform bound for ReLU networks.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Fully connected layer, `y = x W + b` with `W [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![inputs, outputs], uniform(rng, inputs * outputs, kaiming_bound(inputs))).unwrap(),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Dense { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel;
        let w = store.add(
            format!("{name}.weight"),
            Tensor::new(
                vec![out_ch, in_ch, kernel],
                uniform(rng, out_ch * fan_in, kaiming_bound(fan_in)),
            )
            .unwrap(),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Conv1d { w, b, stride, padding }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm1d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// In `Train` mode the batch statistics are used and an update for the
    /// running statistics is pushed onto `updates`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut Vec<RunningUpdate>,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, None, self.eps)?;
                updates.push(RunningUpdate {
                    layer: *self,
                    stats: stats.expect("training batchnorm returns statistics"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.value(self.running_mean).data();
                let rv = store.value(self.running_var).data();
                Ok(g.batch_norm(x, gamma, beta, Some((rm, rv)), self.eps)?.0)
            }
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b * correction;
        }
    }
}

/// One LSTM layer; gate biases start at zero except the forget gate at 1.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

/// Parameter handles of one layer bound into a graph, reused across steps.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    w_ih: Var,
    w_hh: Var,
    b: Var,
    hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(
            format!("{name}.w_ih"),
            Tensor::new(vec![4 * hidden, inputs], uniform(rng, 4 * hidden * inputs, bound)).unwrap(),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            Tensor::new(vec![4 * hidden, hidden], uniform(rng, 4 * hidden * hidden, bound)).unwrap(),
        );
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.bias"), Tensor::new(vec![4 * hidden], bias).unwrap());
        LstmLayer {
            w_ih,
            w_hh,
            b,
            inputs,
            hidden,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w_ih: g.param(store, self.w_ih),
            w_hh: g.param(store, self.w_hh),
            b: g.param(store, self.b),
            hidden: self.hidden,
        }
    }
}

impl BoundLstm {
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let h = g.input(Tensor::zeros(&[batch, self.hidden]));
        let c = g.input(Tensor::zeros(&[batch, self.hidden]));
        (h, c)
    }

    /// Advances one step, returning the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hc = g.lstm_cell(x, h, c, self.w_ih, self.w_hh, self.b)?;
        let h = g.slice_cols(hc, 0, self.hidden)?;
        let c = g.slice_cols(hc, self.hidden, self.hidden)?;
        Ok((h, c))
    }
}
