use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{run_episode, write_atomic, PretrainCache};
use super::{draw_episode_config, Episode, Randomization};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::features::PredictionMatrix;
use crate::kernel::{ParamStore, Tensor};

pub const LOG_SCHEMA_VERSION: u32 = 1;

pub struct CorpusRequest<'a> {
    /// Standardized source domains.
    pub data: &'a [DomainDataset],
    pub ranges: &'a Randomization,
    pub n_episodes: usize,
    /// Index of the first episode; a separate log with a disjoint index
    /// range gives held-out episodes sharing the same split pool.
    pub first_index: u64,
    pub master_seed: u64,
    pub workers: usize,
    pub log_path: &'a Path,
    pub cache: &'a PretrainCache,
    /// When set, each episode's prediction matrices are stored here.
    pub predictions_dir: Option<&'a Path>,
    pub record_timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub requested: usize,
    pub already_present: usize,
    pub generated: usize,
    pub failed: usize,
    pub failure_rate: f64,
    pub per_algorithm: BTreeMap<String, usize>,
}

fn parse_line(line: &str, lineno: usize) -> Result<Episode> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::format("episode log", format!("line {lineno}: {e}")))?;
    let found = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0) as u32;
    if found != LOG_SCHEMA_VERSION {
        return Err(Error::Version {
            what: "episode log",
            found,
            expected: LOG_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(v).map_err(|e| Error::format("episode log", format!("line {lineno}: {e}")))
}

/// Complete lines of the log, sorted by episode index. A trailing partial
/// line (an interrupted append) is ignored.
pub fn read_log(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("episode log {}", path.display()))
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ep = parse_line(line, i + 1)?;
        if seen.insert(ep.episode_index) {
            out.push(ep);
        }
    }
    out.sort_by_key(|e| e.episode_index);
    Ok(out)
}

fn truncate_partial_tail(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if keep != bytes.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        f.set_len(keep as u64)
            .map_err(|e| Error::io(format!("truncating {}", path.display()), e))?;
    }
    Ok(())
}

pub fn predictions_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("episode-{index:06}.bin"))
}

pub fn write_predictions(path: &Path, matrices: &[PredictionMatrix]) -> Result<()> {
    let mut store = ParamStore::new();
    for (e, m) in matrices.iter().enumerate() {
        store.add_buffer(
            format!("epoch{e}"),
            Tensor::new(vec![m.rows(), m.classes()], m.probs().to_vec())?,
        );
    }
    write_atomic(path, &store.to_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionMatrix>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    ParamStore::read_entries(&mut bytes.as_slice())?
        .into_iter()
        .map(|(_, t)| {
            let s = t.shape().to_vec();
            if s.len() != 2 {
                return Err(Error::format("prediction file", format!("tensor of rank {}", s.len())));
            }
            PredictionMatrix::new(s[0], s[1], t.into_data())
        })
        .collect()
}

fn summarize(log: &[Episode], requested: usize, already_present: usize, generated: usize) -> CorpusReport {
    let failed = log.iter().filter(|e| !e.is_ok()).count();
    let mut per_algorithm = BTreeMap::new();
    for e in log.iter().filter(|e| e.is_ok()) {
        *per_algorithm.entry(e.config.adaptation.algorithm.name().to_string()).or_insert(0) += 1;
    }
    CorpusReport {
        requested,
        already_present,
        generated,
        failed,
        failure_rate: if log.is_empty() { 0.0 } else { failed as f64 / log.len() as f64 },
        per_algorithm,
    }
}

/// Ensures episodes `first_index..first_index + n_episodes` are present in the log, running the
/// missing ones on `workers` threads. Lines are appended in index order, so
/// the file does not depend on scheduling.
pub fn generate_corpus(req: &CorpusRequest<'_>) -> Result<CorpusReport> {
    if req.n_episodes == 0 {
        return Err(Error::invalid("corpus needs at least one episode"));
    }
    if req.workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    let existing = if req.log_path.exists() {
        truncate_partial_tail(req.log_path)?;
        read_log(req.log_path)?
    } else {
        Vec::new()
    };
    let present: HashSet<u64> = existing.iter().map(|e| e.episode_index).collect();
    let ids: Vec<String> = req.data.iter().map(|d| d.domain_id().to_string()).collect();
    let k = req
        .data
        .first()
        .ok_or_else(|| Error::invalid("simulation needs source data"))?
        .num_classes();
    let configs = (req.first_index..req.first_index + req.n_episodes as u64)
        .filter(|i| !present.contains(i))
        .map(|i| draw_episode_config(req.master_seed, i, req.ranges, &ids, k))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = req.predictions_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut splits: Vec<_> = configs.iter().map(|c| c.split.clone()).collect();
    splits.sort_by(|a, b| (&a.target, &a.sources).cmp(&(&b.target, &b.sources)));
    splits.dedup();
    pool.install(|| {
        splits
            .par_iter()
            .try_for_each(|s| req.cache.get(req.data, s, req.master_seed).map(|_| ()))
    })?;

    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(req.log_path)
        .map_err(|e| Error::io(format!("opening {}", req.log_path.display()), e))?;
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<String>)>();
    let generated = configs.len();
    std::thread::scope(|scope| -> Result<()> {
        let writer = scope.spawn(move || -> Result<()> {
            let mut pending: BTreeMap<usize, String> = BTreeMap::new();
            let mut next = 0;
            for (pos, line) in rx {
                pending.insert(pos, line?);
                while let Some(line) = pending.remove(&next) {
                    file.write_all(line.as_bytes())
                        .and_then(|_| file.flush())
                        .map_err(|e| Error::io("appending to the episode log", e))?;
                    next += 1;
                }
            }
            Ok(())
        });
        pool.install(|| {
            configs.par_iter().enumerate().for_each_with(tx, |tx, (pos, cfg)| {
                if abort.load(Ordering::Relaxed) {
                    return;
                }
                let line = run_episode(req.data, cfg, req.cache, req.record_timing).and_then(|out| {
                    if let (Some(dir), true) = (req.predictions_dir, out.episode.is_ok()) {
                        write_predictions(&predictions_path(dir, cfg.episode_index), &out.matrices)?;
                    }
                    let mut s = serde_json::to_string(&out.episode)
                        .map_err(|e| Error::format("episode", e.to_string()))?;
                    s.push('\n');
                    Ok(s)
                });
                if line.is_err() {
                    abort.store(true, Ordering::Relaxed);
                }
                let _ = tx.send((pos, line));
            });
        });
        writer.join().expect("writer thread panicked")
    })?;
    let log = read_log(req.log_path)?;
    Ok(summarize(&log, req.n_episodes, present.len(), generated))
}
