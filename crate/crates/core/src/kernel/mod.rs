//! Minimal reverse-mode differentiation kernel: tensors, a recording
//! graph, the layers the networks in this crate need, and optimizers.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var, LOG_FLOOR};
pub use layers::{BatchNorm1d, BoundLstm, Conv1d, Dense, LstmLayer, Mode, RunningUpdate};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
