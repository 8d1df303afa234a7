//! Multi-domain windowed time-series data: the synthetic generator, CSV
//! exchange, standardization and deterministic subset sampling.

mod csv_io;
mod dataset;
mod split;
mod standardize;
mod synth;

pub use csv_io::{read_csv, read_csv_file, write_csv, write_csv_file};
pub use dataset::{DomainDataset, Unlabeled};
pub use split::{holdout_split, sample_target_sets, DropSpec, TargetSplit};
pub use standardize::{standardize, ChannelStats, STD_FLOOR};
pub use synth::{generate_synthetic, Heterogeneity, SyntheticConfig};
