//! Source pretraining and the four target-adaptation procedures.

mod net;
mod train;

pub use net::{ClassifierNet, ClassifierSpec, Forward};
pub use train::{
    corrupt_labels, information_terms, nearest_centroid_labels, pretrain, run_adaptation, AdaptationConfig,
    AdaptationRun, Adapter, Algorithm, LabeledBatch, PretrainConfig, PretrainReport, UnlabeledBatch,
};
