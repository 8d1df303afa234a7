//! Domain-randomized adaptation episodes over source data, and the
//! resumable episode log they are written to.

mod corpus;
mod episode;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationConfig, Algorithm};
use crate::data::DropSpec;
use crate::error::{Error, Result};
use crate::features::FeatureRecord;
use crate::kernel::OptimizerKind;
use crate::rng::{derive_seed, stream, tag};

pub use corpus::{
    generate_corpus, predictions_path, read_log, read_predictions, write_predictions, CorpusReport, CorpusRequest,
    LOG_SCHEMA_VERSION,
};
pub use episode::{run_episode, EpisodeOutcome, PretrainCache, VirtualSplit};

/// Ranges every episode parameter is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Randomization {
    pub algorithms: Vec<Algorithm>,
    /// Inclusive range of labeled samples for fine-tuning.
    pub finetune_samples: [usize; 2],
    /// Inclusive range of unlabeled samples for the other procedures.
    pub unlabeled_samples: [usize; 2],
    /// Log-uniform learning-rate range.
    pub learning_rate: [f64; 2],
    /// Probability of plain SGD instead of Adam.
    pub sgd_probability: f64,
    pub lambdas: Vec<f64>,
    /// Uniform mislabeling-rate range (fine-tuning only).
    pub label_noise: [f64; 2],
    /// Probability that the virtual target's class distribution is skewed.
    pub imbalance_probability: f64,
    /// Drop rates applied to a random half of the classes when skewed.
    pub imbalance_rates: Vec<f64>,
    pub epochs: usize,
    pub n_val: usize,
    /// Fewest domains a virtual source may hold; the most is every
    /// non-target domain.
    pub min_virtual_sources: usize,
    /// Number of distinct virtual splits episodes draw from. Each needs its
    /// own pretrained model.
    pub split_pool: usize,
}

impl Default for Randomization {
    fn default() -> Self {
        Randomization {
            algorithms: Algorithm::ALL.to_vec(),
            finetune_samples: [1, 50],
            unlabeled_samples: [50, 500],
            learning_rate: [1e-4, 1e-2],
            sgd_probability: 0.2,
            lambdas: vec![0.1, 0.5, 1.0],
            label_noise: [0.0, 0.4],
            imbalance_probability: 0.25,
            imbalance_rates: vec![0.2, 0.4, 0.6, 0.8],
            epochs: 20,
            n_val: 250,
            min_virtual_sources: 2,
            split_pool: 24,
        }
    }
}

impl Randomization {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("randomization: {m}")));
        if self.algorithms.is_empty() || self.lambdas.is_empty() {
            return bad("algorithm and lambda lists must be nonempty");
        }
        for [lo, hi] in [self.finetune_samples, self.unlabeled_samples] {
            if lo == 0 || lo > hi {
                return bad("sample ranges must satisfy 1 <= lo <= hi");
            }
        }
        let [lo, hi] = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("learning-rate range must satisfy 0 < lo <= hi");
        }
        let [lo, hi] = self.label_noise;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("label-noise range must lie in [0, 1]");
        }
        for p in [self.sgd_probability, self.imbalance_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.imbalance_probability > 0.0 && self.imbalance_rates.is_empty() {
            return bad("imbalance rates must be nonempty when imbalance can occur");
        }
        if self.imbalance_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("imbalance rates must lie in [0, 1)");
        }
        if self.n_val == 0 {
            return bad("validation size must be positive");
        }
        if self.min_virtual_sources == 0 || self.split_pool == 0 {
            return bad("min_virtual_sources and split_pool must be positive");
        }
        Ok(())
    }
}

/// Everything that determines one simulated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub master_seed: u64,
    pub episode_index: u64,
    /// Seed for target sampling and adaptation.
    pub seed: u64,
    pub split: VirtualSplit,
    pub adaptation: AdaptationConfig,
    pub n_val: usize,
    pub imbalance: Option<DropSpec>,
}

/// Split number `slot` of the pool: a random target and a random subset of
/// the remaining domains, sized uniformly between the configured minimum and
/// all of them.
fn pooled_split(master_seed: u64, slot: u64, min_sources: usize, ids: &[String]) -> VirtualSplit {
    let mut rng = stream(master_seed, &[tag("split-pool"), slot]);
    let target = rng.random_range(0..ids.len());
    let mut others: Vec<usize> = (0..ids.len()).filter(|&i| i != target).collect();
    let size = rng.random_range(min_sources.min(others.len())..=others.len());
    others.shuffle(&mut rng);
    VirtualSplit::with_sources(ids, target, &others[..size])
}

fn uniform_incl(rng: &mut crate::rng::Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

fn uniform_f(rng: &mut crate::rng::Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Deterministic function of `(master_seed, episode_index)`.
pub fn draw_episode_config(
    master_seed: u64,
    episode_index: u64,
    ranges: &Randomization,
    source_ids: &[String],
    num_classes: usize,
) -> Result<EpisodeConfig> {
    ranges.validate()?;
    if source_ids.len() < 2 {
        return Err(Error::invalid(format!(
            "simulation needs at least 2 source domains to split, got {}",
            source_ids.len()
        )));
    }
    let mut rng = stream(master_seed, &[tag("episode-config"), episode_index]);
    let slot = rng.random_range(0..ranges.split_pool) as u64;
    let split = pooled_split(master_seed, slot, ranges.min_virtual_sources, source_ids);
    let algorithm = *ranges.algorithms.choose(&mut rng).expect("nonempty");
    let n = if algorithm.labeled() {
        uniform_incl(&mut rng, ranges.finetune_samples)
    } else {
        uniform_incl(&mut rng, ranges.unlabeled_samples)
    };
    let seed = derive_seed(master_seed, &[tag("episode"), episode_index]);
    let mut adaptation = AdaptationConfig::new(algorithm, n, seed);
    adaptation.epochs = ranges.epochs;
    let [lo, hi] = ranges.learning_rate;
    adaptation.learning_rate = uniform_f(&mut rng, [lo.ln(), hi.ln()]).exp();
    if lo == hi {
        adaptation.learning_rate = lo;
    }
    adaptation.optimizer = if rng.random_bool(ranges.sgd_probability) {
        OptimizerKind::Sgd
    } else {
        OptimizerKind::Adam
    };
    adaptation.lambda = *ranges.lambdas.choose(&mut rng).expect("nonempty");
    adaptation.label_noise = if algorithm.labeled() {
        uniform_f(&mut rng, ranges.label_noise)
    } else {
        0.0
    };
    let imbalance = if rng.random_bool(ranges.imbalance_probability) {
        let rate = *ranges.imbalance_rates.choose(&mut rng).expect("nonempty");
        let mut classes: Vec<usize> = (0..num_classes).collect();
        classes.shuffle(&mut rng);
        let mut chosen = classes[..num_classes / 2].to_vec();
        chosen.sort_unstable();
        Some(DropSpec {
            rates: chosen.into_iter().map(|c| (c, rate)).collect(),
        })
    } else {
        None
    };
    Ok(EpisodeConfig {
        master_seed,
        episode_index,
        seed,
        split,
        adaptation,
        n_val: ranges.n_val,
        imbalance,
    })
}

/// One simulated adaptation run: features per epoch plus ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub schema_version: u32,
    pub episode_index: u64,
    pub config: EpisodeConfig,
    pub records: Vec<FeatureRecord>,
    /// Mean top-class probability on the validation set per epoch.
    #[serde(default)]
    pub confidence: Vec<f64>,
    pub provenance: Provenance,
    /// Set when adaptation diverged; such episodes carry no records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Episode {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    pub fn final_delta(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.delta_acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub code_version: String,
    /// Only recorded on request, since it breaks byte-identical reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
}

#[cfg(test)]
mod tests;
