use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_adaptation, AdaptationConfig, Algorithm, ClassifierNet};
use crate::data::{sample_target_sets, DomainDataset, DropSpec};
use crate::error::{Error, Result};
use crate::features::{build_feature_sequence, mean_max_confidence, FeatureRecord, PredictionMatrix};
use crate::rng::{derive_seed, stream, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: usize,
    pub algorithms: Vec<Algorithm>,
    pub epochs: usize,
    pub n_val: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub finetune_samples: [usize; 2],
    pub unlabeled_samples: [usize; 2],
    /// Drop rate for the skewed-validation variant.
    pub imbalance_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: 10,
            algorithms: Algorithm::ALL.to_vec(),
            epochs: 20,
            n_val: 250,
            learning_rate: 1e-3,
            lambda: 0.5,
            finetune_samples: [1, 50],
            unlabeled_samples: [50, 500],
            imbalance_rate: 0.8,
        }
    }
}

pub struct EvalInputs<'a> {
    /// Classifier pretrained on all source training data.
    pub net: &'a ClassifierNet,
    pub source_train: &'a DomainDataset,
    /// Labeled source data never used for training.
    pub source_holdout: &'a DomainDataset,
    pub targets: &'a [DomainDataset],
}

/// Everything measured in one (target, algorithm, seed) adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub target: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub n_target: usize,
    pub accuracies: Vec<f64>,
    /// Label-free features on the validation set.
    pub records: Vec<FeatureRecord>,
    pub softmax_scores: Vec<f64>,
    pub source_accuracies: Vec<f64>,
    /// Classes thinned out of the skewed validation variant.
    pub dropped_classes: Vec<usize>,
    pub imbalanced_accuracies: Vec<f64>,
    pub imbalanced_records: Vec<FeatureRecord>,
    pub imbalanced_softmax_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvalRun {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

fn rows(m: &PredictionMatrix, keep: &[usize]) -> Result<PredictionMatrix> {
    let mut probs = Vec::with_capacity(keep.len() * m.classes());
    for &i in keep {
        probs.extend_from_slice(m.row(i));
    }
    PredictionMatrix::new(keep.len(), m.classes(), probs)
}

fn eval_one(inputs: &EvalInputs<'_>, cfg: &EvalConfig, master_seed: u64, target: &DomainDataset, alg: Algorithm, s: usize) -> Result<EvalRun> {
    let seed = derive_seed(master_seed, &[tag("eval"), tag(target.domain_id()), tag(alg.name()), s as u64]);
    let mut rng = stream(seed, &[tag("eval-draw")]);
    let range = if alg.labeled() {
        cfg.finetune_samples
    } else {
        cfg.unlabeled_samples
    };
    let n = rng.random_range(range[0]..=range[1]);
    let k = target.num_classes();
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let mut dropped = classes[..k / 2].to_vec();
    dropped.sort_unstable();

    let split = sample_target_sets(target, n, cfg.n_val, seed, None)?;
    let train = target.subset(&split.train)?;
    let val = target.subset(&split.val)?;
    let mut adaptation = AdaptationConfig::new(alg, n, seed);
    adaptation.epochs = cfg.epochs;
    adaptation.learning_rate = cfg.learning_rate;
    adaptation.lambda = cfg.lambda;
    let drop = DropSpec {
        rates: dropped.iter().map(|&c| (c, cfg.imbalance_rate)).collect(),
    };
    let all: Vec<usize> = (0..val.len()).collect();
    let keep = drop.apply(&all, val.labels())?;
    let keep_labels: Vec<usize> = keep.iter().map(|&i| val.label(i)).collect();

    let mut out = EvalRun {
        target: target.domain_id().to_string(),
        algorithm: alg,
        seed: s as u64,
        n_target: n,
        accuracies: Vec::new(),
        records: Vec::new(),
        softmax_scores: Vec::new(),
        source_accuracies: Vec::new(),
        dropped_classes: dropped,
        imbalanced_accuracies: Vec::new(),
        imbalanced_records: Vec::new(),
        imbalanced_softmax_scores: Vec::new(),
        failure: None,
    };
    let run = match run_adaptation(
        inputs.net,
        Some(inputs.source_train),
        &train,
        &val,
        &adaptation,
        &[inputs.source_holdout.unlabeled()],
    ) {
        Ok(r) => r,
        Err(Error::Numerical(msg)) => {
            out.failure = Some(format!("non-finite value in {msg}"));
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let skewed = run.matrices.iter().map(|m| rows(m, &keep)).collect::<Result<Vec<_>>>()?;
    out.records = build_feature_sequence(&run.matrices, None)?;
    out.softmax_scores = run.matrices.iter().map(mean_max_confidence).collect::<Result<_>>()?;
    out.source_accuracies = run.probes[0]
        .iter()
        .map(|m| m.accuracy(inputs.source_holdout.labels()))
        .collect::<Result<_>>()?;
    out.imbalanced_accuracies = skewed.iter().map(|m| m.accuracy(&keep_labels)).collect::<Result<_>>()?;
    out.imbalanced_records = build_feature_sequence(&skewed, None)?;
    out.imbalanced_softmax_scores = skewed.iter().map(mean_max_confidence).collect::<Result<_>>()?;
    out.accuracies = run.accuracies;
    Ok(out)
}

/// Adapts the source model to every target with every algorithm and seed.
/// Results come back in (target, algorithm, seed) order for any `workers`.
pub fn run_eval_cells(inputs: &EvalInputs<'_>, cfg: &EvalConfig, master_seed: u64, workers: usize) -> Result<Vec<EvalRun>> {
    if inputs.targets.is_empty() || cfg.algorithms.is_empty() || cfg.seeds == 0 {
        return Err(Error::Config("evaluation needs targets, algorithms and seeds".into()));
    }
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    let cells: Vec<(usize, Algorithm, usize)> = (0..inputs.targets.len())
        .flat_map(|t| cfg.algorithms.iter().flat_map(move |&a| (0..cfg.seeds).map(move |s| (t, a, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(t, a, s)| eval_one(inputs, cfg, master_seed, &inputs.targets[t], a, s))
            .collect()
    })
}
