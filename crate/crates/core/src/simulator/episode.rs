use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Episode, EpisodeConfig, Provenance, LOG_SCHEMA_VERSION};
use crate::adapt::{pretrain, run_adaptation, ClassifierNet, PretrainConfig};
use crate::data::{holdout_split, sample_target_sets, DomainDataset};
use crate::error::{Error, Result};
use crate::features::{build_feature_sequence, mean_max_confidence, PredictionMatrix};
use crate::rng::{derive_seed, tag};

/// Partition of the source domains into virtual source and virtual target.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualSplit {
    pub target: String,
    pub sources: Vec<String>,
    /// With few domains the target domain is halved: one half joins the
    /// virtual source, the other is the virtual target.
    pub within_domain: bool,
}

const WHOLE_DOMAIN_MIN: usize = 4;

impl VirtualSplit {
    /// Target `ids[target]` against every other domain.
    pub fn draw(ids: &[String], target: usize) -> Self {
        let others: Vec<usize> = (0..ids.len()).filter(|&i| i != target).collect();
        Self::with_sources(ids, target, &others)
    }

    /// Target `ids[target]` against the domains at `sources`. With fewer than
    /// four domains the sources are always all the others.
    pub fn with_sources(ids: &[String], target: usize, sources: &[usize]) -> Self {
        let within_domain = ids.len() < WHOLE_DOMAIN_MIN;
        let sources = if within_domain {
            (0..ids.len()).filter(|&i| i != target).map(|i| ids[i].clone()).collect()
        } else {
            let mut s = sources.to_vec();
            s.sort_unstable();
            s.into_iter().map(|i| ids[i].clone()).collect()
        };
        VirtualSplit {
            target: ids[target].clone(),
            sources,
            within_domain,
        }
    }

    fn find<'a>(data: &'a [DomainDataset], id: &str) -> Result<&'a DomainDataset> {
        data.iter()
            .find(|d| d.domain_id() == id)
            .ok_or_else(|| Error::invalid(format!("source domain {id} not found")))
    }

    /// Returns the virtual-source domains and the virtual-target domain.
    pub fn materialize(&self, data: &[DomainDataset], master_seed: u64) -> Result<(Vec<DomainDataset>, DomainDataset)> {
        let mut src: Vec<DomainDataset> = self
            .sources
            .iter()
            .map(|s| Self::find(data, s).cloned())
            .collect::<Result<_>>()?;
        let target = Self::find(data, &self.target)?;
        if self.within_domain {
            let seed = derive_seed(master_seed, &[tag("within-split"), tag(&self.target)]);
            let (keep, held) = holdout_split(target, 0.5, seed)?;
            src.push(keep);
            Ok((src, held))
        } else {
            Ok((src, target.clone()))
        }
    }
}

/// A pretrained virtual-source classifier and the data it was trained on.
pub struct Pretrained {
    pub net: ClassifierNet,
    pub source: DomainDataset,
    pub target: DomainDataset,
}

/// Pretrained classifiers keyed by split, seed, pretraining config and data.
pub struct PretrainCache {
    cfg: PretrainConfig,
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Arc<Pretrained>>>,
}

impl PretrainCache {
    pub fn new(cfg: PretrainConfig, dir: Option<PathBuf>) -> Self {
        PretrainCache {
            cfg,
            dir,
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    fn key(&self, split: &VirtualSplit, master_seed: u64, src: &[DomainDataset]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(split).expect("split serializes"));
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        h.update(master_seed.to_le_bytes());
        for d in src {
            h.update(d.domain_id().as_bytes());
            h.update((d.len() as u64).to_le_bytes());
            for v in d.raw() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn get(&self, data: &[DomainDataset], split: &VirtualSplit, master_seed: u64) -> Result<Arc<Pretrained>> {
        let (src, target) = split.materialize(data, master_seed)?;
        let key = self.key(split, master_seed, &src);
        if let Some(p) = self.mem.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let refs: Vec<&DomainDataset> = src.iter().collect();
        let seed = derive_seed(master_seed, &[tag("pretrain"), tag(&split.target)]);
        let path = self.dir.as_ref().map(|d| d.join(format!("pretrain-{key}.ckpt")));
        let net = match path.as_ref().filter(|p| p.exists()) {
            Some(p) => {
                let first = refs[0];
                let mut net = ClassifierNet::new(
                    &self.cfg.classifier,
                    first.channels(),
                    first.length(),
                    first.num_classes(),
                    seed,
                )?;
                let bytes = std::fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
                net.load_bytes(&bytes)?;
                net
            }
            None => {
                let (net, _) = pretrain(&refs, &self.cfg, seed)?;
                if let Some(p) = &path {
                    write_atomic(p, &net.to_bytes())?;
                }
                net
            }
        };
        let source = DomainDataset::concat("virtual-source", &refs)?;
        let entry = Arc::new(Pretrained { net, source, target });
        Ok(self
            .mem
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert(entry)
            .clone())
    }
}

pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

/// An episode plus the per-epoch predictions its features came from.
pub struct EpisodeOutcome {
    pub episode: Episode,
    pub matrices: Vec<PredictionMatrix>,
}

/// Pretrains (or reuses) the virtual-source model, adapts it to the
/// virtual target, and logs features and accuracy at every epoch.
/// Divergence yields an episode marked failed rather than an error.
pub fn run_episode(data: &[DomainDataset], config: &EpisodeConfig, cache: &PretrainCache, timing: bool) -> Result<EpisodeOutcome> {
    let start = Instant::now();
    let pre = cache.get(data, &config.split, config.master_seed)?;
    let mut pool = pre.target.clone();
    if let Some(drop) = &config.imbalance {
        let all: Vec<usize> = (0..pool.len()).collect();
        pool = pool.subset(&drop.apply(&all, pool.labels())?)?;
    }
    if pool.len() <= config.n_val {
        return Err(Error::invalid(format!(
            "virtual target {} has {} instances, need more than {} for validation",
            pool.domain_id(),
            pool.len(),
            config.n_val
        )));
    }
    let mut adaptation = config.adaptation.clone();
    adaptation.n_target_samples = adaptation.n_target_samples.min(pool.len() - config.n_val);
    let split = sample_target_sets(&pool, adaptation.n_target_samples, config.n_val, config.seed, None)?;
    let train = pool.subset(&split.train)?;
    let val = pool.subset(&split.val)?;
    let provenance = |t: Instant| Provenance {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_ms: timing.then(|| t.elapsed().as_millis() as u64),
    };
    let mut effective = config.clone();
    effective.adaptation = adaptation.clone();
    let run = match run_adaptation(&pre.net, Some(&pre.source), &train, &val, &adaptation, &[]) {
        Ok(run) => run,
        Err(Error::Numerical(msg)) => {
            return Ok(EpisodeOutcome {
                episode: Episode {
                    schema_version: LOG_SCHEMA_VERSION,
                    episode_index: config.episode_index,
                    config: effective,
                    records: Vec::new(),
                    confidence: Vec::new(),
                    provenance: provenance(start),
                    failure: Some(format!("non-finite value in {msg}")),
                },
                matrices: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    // Features see predictions only; accuracy is attached afterwards.
    let mut records = build_feature_sequence(&run.matrices, None)?;
    let confidence = run.matrices.iter().map(mean_max_confidence).collect::<Result<Vec<_>>>()?;
    let a0 = run.accuracies[0];
    for (r, &a) in records.iter_mut().zip(&run.accuracies) {
        r.acc = Some(a);
        r.delta_acc = Some(a - a0);
    }
    Ok(EpisodeOutcome {
        episode: Episode {
            schema_version: LOG_SCHEMA_VERSION,
            episode_index: config.episode_index,
            config: effective,
            records,
            confidence,
            provenance: provenance(start),
            failure: None,
        },
        matrices: run.matrices,
    })
}
