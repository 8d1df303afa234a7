//! End-to-end stages over a run directory: data, source pretraining, episode
//! simulation, estimator training and evaluation. Each stage reads the
//! artifacts of the previous ones from disk and fails with a named
//! `MissingArtifact` when they are absent.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{pretrain, ClassifierNet, PretrainConfig, PretrainReport};
use crate::data::{
    generate_synthetic, holdout_split, read_csv_file, write_csv_file, ChannelStats, DomainDataset, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::estimator::{train_estimator, Body, EstimatorNet, EstimatorSpec, FeatureLayout, TrainReport, TrainSpec};
use crate::eval::{
    build_report, ensure_disjoint, pearson, run_eval_cells, similarity, write_report, DegradationSummary, EstimationTrace,
    EvalConfig, EvalInputs, EvalRun, Report,
};
use crate::features::FeatureRecord;
use crate::rng::{derive_seed, tag};
use crate::simulator::{generate_corpus, read_log, CorpusReport, CorpusRequest, Episode, PretrainCache, Randomization};

pub const MANIFEST_VERSION: u32 = 1;
pub const PRIMARY_ESTIMATOR: &str = "DAPPER";
/// Largest seed a config file can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;
/// Test episodes are numbered from here so they never collide with the
/// training corpus.
pub const TEST_FIRST_INDEX: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Ignored when `csv` is set. Its `seed` is overwritten from the run seed.
    pub synthetic: SyntheticConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Window length used to cut CSV input.
    pub window_length: usize,
    /// The last `targets` domains are deployment targets; the rest are sources.
    pub targets: usize,
    /// Share of each source domain kept out of all training, for SrcLabel.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticConfig::default(),
            csv: None,
            window_length: 128,
            targets: 2,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub episodes: usize,
    /// Extra episodes never used for estimator training or selection.
    pub test_episodes: usize,
    pub ranges: Randomization,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            episodes: 300,
            test_episodes: 100,
            ranges: Randomization::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub spec: EstimatorSpec,
    pub train: TrainSpec,
    /// Also train reduced-input and feed-forward variants for comparison.
    pub ablations: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            spec: EstimatorSpec::default(),
            // 1e-5 barely moves a freshly initialized net over a few hundred
            // episodes.
            train: TrainSpec {
                learning_rate: 1e-3,
                epochs: 100,
                restarts: 2,
                ..TrainSpec::default()
            },
            ablations: true,
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Every knob of every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub simulate: SimulateConfig,
    pub estimator: EstimatorConfig,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            simulate: SimulateConfig::default(),
            estimator: EstimatorConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a configuration. Keys left out, including inside a partially
    /// given table, keep the run defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string().trim().replace('\n', " "));
        let given: toml::Table = text.parse().map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| err(&e))?;
        merge_tables(&mut base, given);
        let cfg: RunConfig = base.try_into().map_err(|e| err(&e))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    /// Fills values derived from the master seed.
    pub fn resolved(mut self) -> Self {
        // TOML integers are signed 64-bit, so snapshot seeds keep 63 bits.
        self.data.synthetic.seed = derive_seed(self.seed, &[tag("data")]) & MAX_SEED;
        self
    }

    /// Sets the adaptation length of both simulated and evaluated runs.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.simulate.ranges.epochs = epochs;
        self.evaluate.epochs = epochs;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > MAX_SEED {
            return Err(Error::Config(format!("seed must be at most {MAX_SEED}")));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.data.targets == 0 {
            return Err(Error::Config("data.targets must be positive".into()));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(Error::Config("data.holdout_fraction must lie in (0, 1)".into()));
        }
        if self.simulate.episodes == 0 {
            return Err(Error::Config("simulate.episodes must be positive".into()));
        }
        self.simulate.ranges.validate()
    }
}

/// Paths of every artifact inside one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }

    pub fn data_csv(&self) -> PathBuf {
        self.root.join("data/domains.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.json")
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("models/classifier.ckpt")
    }

    pub fn classifier_meta(&self) -> PathBuf {
        self.root.join("models/classifier.json")
    }

    pub fn corpus_log(&self) -> PathBuf {
        self.root.join("corpus/episodes.jsonl")
    }

    pub fn test_log(&self) -> PathBuf {
        self.root.join("corpus/test_episodes.jsonl")
    }

    pub fn pretrain_cache(&self) -> PathBuf {
        self.root.join("corpus/pretrain")
    }

    pub fn estimator(&self, key: &str) -> PathBuf {
        self.root.join(format!("estimator/{key}.ckpt"))
    }

    pub fn estimator_report(&self) -> PathBuf {
        self.root.join("estimator/report.json")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        write_file(&self.config(), cfg.to_toml()?.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("report", e.to_string()))?;
    write_file(path, (text + "\n").as_bytes())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} ({})", path.display())))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    require(path, what)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(what, e.to_string()))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub schema_version: u32,
    pub domains: Vec<String>,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub instances: Vec<usize>,
    pub sha256: String,
}

/// Generates (or ingests) the domains and stores them with a manifest.
pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<DataManifest> {
    cfg.validate()?;
    let domains = match &cfg.data.csv {
        Some(p) => read_csv_file(p, cfg.data.window_length, None)?,
        None => generate_synthetic(&cfg.data.synthetic)?,
    };
    if domains.len() < cfg.data.targets + 2 {
        return Err(Error::Config(format!(
            "{} domains cannot supply {} targets and at least 2 sources",
            domains.len(),
            cfg.data.targets
        )));
    }
    let path = run.data_csv();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    write_csv_file(&domains, &path)?;
    let ids: Vec<String> = domains.iter().map(|d| d.domain_id().to_string()).collect();
    let split = ids.len() - cfg.data.targets;
    let manifest = DataManifest {
        schema_version: MANIFEST_VERSION,
        sources: ids[..split].to_vec(),
        targets: ids[split..].to_vec(),
        domains: ids,
        num_classes: domains[0].num_classes(),
        channels: domains[0].channels(),
        length: domains[0].length(),
        instances: domains.iter().map(|d| d.len()).collect(),
        sha256: file_sha256(&path)?,
    };
    write_json(&run.manifest(), &manifest)?;
    Ok(manifest)
}

/// Standardized data as every downstream stage sees it.
pub struct Prepared {
    pub manifest: DataManifest,
    /// Source training parts, one per source domain.
    pub sources: Vec<DomainDataset>,
    /// Labeled source data held out of every training procedure.
    pub holdout: DomainDataset,
    pub targets: Vec<DomainDataset>,
    pub stats: ChannelStats,
}

impl Prepared {
    pub fn source_refs(&self) -> Vec<&DomainDataset> {
        self.sources.iter().collect()
    }
}

pub fn read_manifest(run: &RunDir) -> Result<DataManifest> {
    let m: DataManifest = read_json(&run.manifest(), "data manifest")?;
    if m.schema_version != MANIFEST_VERSION {
        return Err(Error::Version {
            what: "data manifest",
            found: m.schema_version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(m)
}

/// Loads the stored domains, holds out part of each source and standardizes
/// everything with source-training statistics.
pub fn load_data(cfg: &RunConfig, run: &RunDir) -> Result<Prepared> {
    let manifest = read_manifest(run)?;
    let path = run.data_csv();
    require(&path, "dataset file")?;
    if file_sha256(&path)? != manifest.sha256 {
        return Err(Error::format("dataset file", "content does not match its manifest"));
    }
    let domains = read_csv_file(&path, manifest.length, Some(manifest.num_classes))?;
    let by_id = |id: &String| {
        domains
            .iter()
            .find(|d| d.domain_id() == id)
            .ok_or_else(|| Error::format("dataset file", format!("domain {id} listed in manifest is absent")))
    };
    let hold_seed = derive_seed(cfg.seed, &[tag("holdout")]);
    let mut train_parts = Vec::new();
    let mut hold_parts = Vec::new();
    for id in &manifest.sources {
        let (t, h) = holdout_split(by_id(id)?, cfg.data.holdout_fraction, hold_seed)?;
        train_parts.push(t);
        hold_parts.push(h);
    }
    let refs: Vec<&DomainDataset> = train_parts.iter().collect();
    let stats = ChannelStats::from_datasets(&refs)?;
    let sources = train_parts.iter().map(|d| stats.apply(d)).collect::<Result<Vec<_>>>()?;
    let holds = hold_parts.iter().map(|d| stats.apply(d)).collect::<Result<Vec<_>>>()?;
    let holdout = DomainDataset::concat("source-holdout", &holds.iter().collect::<Vec<_>>())?;
    let targets = manifest
        .targets
        .iter()
        .map(|id| stats.apply(by_id(id)?))
        .collect::<Result<Vec<_>>>()?;
    let mut training: Vec<&DomainDataset> = sources.iter().collect();
    training.extend(targets.iter());
    ensure_disjoint(&holdout, &training)?;
    Ok(Prepared {
        manifest,
        sources,
        holdout,
        targets,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub data_sha256: String,
    pub config: PretrainConfig,
    pub report: PretrainReport,
    pub holdout_accuracy: f64,
    pub target_accuracies: Vec<(String, f64)>,
}

/// Trains the deployed classifier on all source training data.
pub fn pretrain_stage(cfg: &RunConfig, run: &RunDir) -> Result<ClassifierMeta> {
    let data = load_data(cfg, run)?;
    let (net, report) = pretrain(&data.source_refs(), &cfg.pretrain, derive_seed(cfg.seed, &[tag("pretrain")]))?;
    let holdout_accuracy = net.predict(data.holdout.unlabeled())?.accuracy(data.holdout.labels())?;
    let target_accuracies = data
        .targets
        .iter()
        .map(|t| Ok((t.domain_id().to_string(), net.predict(t.unlabeled())?.accuracy(t.labels())?)))
        .collect::<Result<Vec<_>>>()?;
    write_file(&run.classifier(), &net.to_bytes())?;
    let meta = ClassifierMeta {
        data_sha256: data.manifest.sha256.clone(),
        config: cfg.pretrain.clone(),
        report,
        holdout_accuracy,
        target_accuracies,
    };
    write_json(&run.classifier_meta(), &meta)?;
    Ok(meta)
}

pub fn load_classifier(cfg: &RunConfig, run: &RunDir, manifest: &DataManifest) -> Result<ClassifierNet> {
    require(&run.classifier(), "classifier checkpoint")?;
    let meta: ClassifierMeta = read_json(&run.classifier_meta(), "classifier metadata")?;
    if meta.data_sha256 != manifest.sha256 || meta.config != cfg.pretrain {
        return Err(Error::Config(
            "classifier checkpoint was trained with other data or settings; rerun pretrain".into(),
        ));
    }
    let mut net = ClassifierNet::new(
        &cfg.pretrain.classifier,
        manifest.channels,
        manifest.length,
        manifest.num_classes,
        0,
    )?;
    let bytes = fs::read(run.classifier()).map_err(|e| Error::io("reading classifier checkpoint", e))?;
    net.load_bytes(&bytes)?;
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub train: CorpusReport,
    pub test: Option<CorpusReport>,
}

/// Simulates adaptation episodes on virtual splits of the source domains,
/// appending to (and resuming) the corpus log, then the held-out test log.
pub fn simulate_stage(cfg: &RunConfig, run: &RunDir) -> Result<SimulateReport> {
    cfg.validate()?;
    let data = load_data(cfg, run)?;
    let cache_dir = run.pretrain_cache();
    fs::create_dir_all(&cache_dir).map_err(|e| Error::io(format!("creating {}", cache_dir.display()), e))?;
    let cache = PretrainCache::new(cfg.pretrain.clone(), Some(cache_dir));
    let master_seed = derive_seed(cfg.seed, &[tag("simulate")]);
    let corpus = |log: &Path, n: usize, first_index: u64| {
        generate_corpus(&CorpusRequest {
            data: &data.sources,
            ranges: &cfg.simulate.ranges,
            n_episodes: n,
            first_index,
            master_seed,
            workers: cfg.workers,
            log_path: log,
            cache: &cache,
            predictions_dir: None,
            record_timing: false,
        })
    };
    let train = corpus(&run.corpus_log(), cfg.simulate.episodes, 0)?;
    let test = match cfg.simulate.test_episodes {
        0 => None,
        n => Some(corpus(&run.test_log(), n, TEST_FIRST_INDEX)?),
    };
    Ok(SimulateReport { train, test })
}

fn load_log(path: &Path, what: &str) -> Result<Vec<Episode>> {
    require(path, what)?;
    let eps: Vec<Episode> = read_log(path)?.into_iter().filter(|e| e.is_ok()).collect();
    if eps.is_empty() {
        return Err(Error::MissingArtifact(format!("successful episodes in the {what}")));
    }
    Ok(eps)
}

/// Successful episodes of the training corpus, in index order.
pub fn load_corpus(run: &RunDir) -> Result<Vec<Episode>> {
    load_log(&run.corpus_log(), "episode log")
}

/// Successful held-out test episodes, in index order.
pub fn load_test_episodes(run: &RunDir) -> Result<Vec<Episode>> {
    load_log(&run.test_log(), "test episode log")
}

/// One estimator trained by the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// File stem of the checkpoint.
    pub key: &'static str,
    /// Method name in reports.
    pub name: String,
    pub spec: EstimatorSpec,
}

pub fn estimator_variants(cfg: &RunConfig) -> Vec<Variant> {
    let base = &cfg.estimator.spec;
    let mut out = vec![Variant {
        key: "dapper",
        name: PRIMARY_ESTIMATOR.into(),
        spec: base.clone(),
    }];
    if !cfg.estimator.ablations {
        return out;
    }
    let full = FeatureLayout::full();
    let layouts = [
        ("gd", full.with_groups(true, false, false)),
        ("gd-iu", full.with_groups(true, true, false)),
        ("feat", full.with_parts(true, false)),
        ("dfeat", full.with_parts(false, true)),
    ];
    for (key, layout) in layouts {
        out.push(Variant {
            key,
            name: format!("{PRIMARY_ESTIMATOR}[{}]", layout.label()),
            spec: EstimatorSpec {
                layout,
                ..base.clone()
            },
        });
    }
    out.push(Variant {
        key: "mlp",
        name: format!("{PRIMARY_ESTIMATOR}[MLP]"),
        spec: EstimatorSpec {
            body: Body::FeedForward,
            ..base.clone()
        },
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEntry {
    pub name: String,
    pub key: String,
    pub num_params: usize,
    pub report: TrainReport,
}

/// Trains the estimator (and its ablation variants) on the corpus.
pub fn train_estimator_stage(cfg: &RunConfig, run: &RunDir) -> Result<Vec<EstimatorEntry>> {
    let manifest = read_manifest(run)?;
    let eps = load_corpus(run)?;
    let records: Vec<&[FeatureRecord]> = eps.iter().map(|e| e.records.as_slice()).collect();
    let dir = run.root().join("estimator");
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::new();
    for v in estimator_variants(cfg) {
        // One seed for every variant, so all are selected on the same held-out
        // sequences.
        let seed = derive_seed(cfg.seed, &[tag("estimator")]);
        let (net, report) = train_estimator(&records, manifest.num_classes, &v.spec, &cfg.estimator.train, seed)?;
        net.save(&run.estimator(v.key))?;
        entries.push(EstimatorEntry {
            name: v.name,
            key: v.key.to_string(),
            num_params: net.num_params(),
            report,
        });
    }
    write_json(&run.estimator_report(), &entries)?;
    Ok(entries)
}

pub fn load_estimator(run: &RunDir, key: &str) -> Result<EstimatorNet> {
    let path = run.estimator(key);
    require(&path, &format!("estimator checkpoint '{key}'"))?;
    EstimatorNet::load(&path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    /// Held-out simulated episodes.
    pub test_episodes: DegradationSummary,
    /// Adaptation runs on the real targets.
    pub evaluation_runs: DegradationSummary,
}

/// Mean similarity (percent) per method over held-out simulated episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSimilarity {
    pub episodes: usize,
    pub methods: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiCorrelation {
    pub episodes: usize,
    pub points: usize,
    /// Pooled over every epoch of every episode.
    pub pearson: f64,
    /// Mean of per-episode correlations, over episodes where it is defined.
    pub mean_within_episode: Option<f64>,
}

/// Correlation between the mutual-information estimate and accuracy over the
/// simulated corpus.
pub fn mi_correlation(eps: &[Episode]) -> Result<MiCorrelation> {
    let (mut mi, mut acc) = (Vec::new(), Vec::new());
    let mut within = Vec::new();
    for e in eps {
        let (mut m, mut a) = (Vec::new(), Vec::new());
        for r in &e.records {
            let Some(y) = r.acc else { continue };
            m.push(r.gd - r.iu);
            a.push(y);
        }
        if let Ok(r) = pearson(&m, &a) {
            within.push(r);
        }
        mi.extend(m);
        acc.extend(a);
    }
    Ok(MiCorrelation {
        episodes: eps.len(),
        points: mi.len(),
        pearson: pearson(&mi, &acc)?,
        mean_within_episode: (!within.is_empty()).then(|| within.iter().sum::<f64>() / within.len() as f64),
    })
}

pub struct EvalOutcome {
    pub report: Report,
    pub degradation: DegradationReport,
    pub simulated: SimulatedSimilarity,
    pub mi: MiCorrelation,
    pub runs: Vec<EvalRun>,
}

/// Adapts the deployed classifier to each target and scores every method.
pub fn evaluate_stage(cfg: &RunConfig, run: &RunDir) -> Result<EvalOutcome> {
    let data = load_data(cfg, run)?;
    let net = load_classifier(cfg, run, &data.manifest)?;
    let variants = estimator_variants(cfg);
    let nets = variants
        .iter()
        .map(|v| load_estimator(run, v.key))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, &EstimatorNet)> = variants.iter().map(|v| v.name.clone()).zip(nets.iter()).collect();
    let source_train = DomainDataset::concat("source-train", &data.source_refs())?;
    let inputs = EvalInputs {
        net: &net,
        source_train: &source_train,
        source_holdout: &data.holdout,
        targets: &data.targets,
    };
    let runs = run_eval_cells(&inputs, &cfg.evaluate, derive_seed(cfg.seed, &[tag("evaluate")]), cfg.workers)?;
    let report = build_report(&runs, &named)?;

    let test = if cfg.simulate.test_episodes > 0 {
        load_test_episodes(run)?
    } else {
        Vec::new()
    };
    let (mut t, mut e, mut s) = (Vec::new(), Vec::new(), Vec::new());
    let mut sims = vec![Vec::new(); named.len() + 1];
    for ep in &test {
        let (Some(truth), Some(c0), Some(cl)) = (ep.final_delta(), ep.confidence.first(), ep.confidence.last()) else {
            continue;
        };
        let truth_trace = EstimationTrace::new("truth", ep.records.iter().map(|r| r.delta_acc.unwrap_or(0.0)).collect());
        for (j, (name, n)) in named.iter().enumerate() {
            let est = EstimationTrace::new(name.clone(), n.estimate_sequence(&ep.records)?);
            if j == 0 {
                e.push(*est.values.last().unwrap());
            }
            sims[j].push(similarity(&truth_trace, &est)?.value * 100.0);
        }
        let soft = EstimationTrace::from_levels("SoftmaxScore", &ep.confidence)?;
        sims[named.len()].push(similarity(&truth_trace, &soft)?.value * 100.0);
        t.push(truth);
        s.push(cl - c0);
    }
    let degradation = DegradationReport {
        test_episodes: DegradationSummary::from_finals(&t, &e, &s),
        evaluation_runs: report.summary.degradation.clone(),
    };
    let mut names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    names.push("SoftmaxScore".into());
    let simulated = SimulatedSimilarity {
        episodes: t.len(),
        methods: names
            .into_iter()
            .zip(&sims)
            .filter(|(_, v)| !v.is_empty())
            .map(|(n, v)| (n, v.iter().sum::<f64>() / v.len() as f64))
            .collect(),
    };
    let eps = load_corpus(run)?;
    let mi = mi_correlation(&eps)?;

    let dir = run.eval_dir();
    write_report(&report, &dir)?;
    write_json(&dir.join("degradation.json"), &degradation)?;
    write_json(&dir.join("mi_correlation.json"), &mi)?;
    write_json(&dir.join("simulated_similarity.json"), &simulated)?;
    let mut lines = String::new();
    for r in &runs {
        lines.push_str(&serde_json::to_string(r).map_err(|e| Error::format("evaluation run", e.to_string()))?);
        lines.push('\n');
    }
    write_file(&dir.join("runs.jsonl"), lines.as_bytes())?;
    Ok(EvalOutcome {
        report,
        degradation,
        simulated,
        mi,
        runs,
    })
}

/// Estimated accuracy change per epoch and, given the starting accuracy, the
/// implied accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub delta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Vec<f64>>,
}

pub fn estimate_records(net: &EstimatorNet, records: &[FeatureRecord], initial_accuracy: Option<f64>) -> Result<Estimate> {
    let delta = net.estimate_sequence(records)?;
    let accuracy = initial_accuracy.map(|a0| delta.iter().map(|d| a0 + d).collect());
    Ok(Estimate { delta, accuracy })
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig, run: &RunDir) -> Result<EvalOutcome> {
    run.write_config(cfg)?;
    gen_data(cfg, run)?;
    pretrain_stage(cfg, run)?;
    simulate_stage(cfg, run)?;
    train_estimator_stage(cfg, run)?;
    evaluate_stage(cfg, run)
}
