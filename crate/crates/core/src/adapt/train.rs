use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::net::ClassifierNet;
use super::net::ClassifierSpec;
use crate::data::{DomainDataset, Unlabeled};
use crate::error::{Error, Result};
use crate::features::PredictionMatrix;
use crate::kernel::{Dense, Graph, Mode, Optimizer, OptimizerKind, ParamId, RunningUpdate, Var};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(rename = "finetune")]
    FineTune,
    Dann,
    Cdan,
    Shot,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::FineTune, Algorithm::Dann, Algorithm::Cdan, Algorithm::Shot];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FineTune => "finetune",
            Algorithm::Dann => "dann",
            Algorithm::Cdan => "cdan",
            Algorithm::Shot => "shot",
        }
    }

    /// Whether the procedure consumes labeled target data.
    pub fn labeled(self) -> bool {
        self == Algorithm::FineTune
    }

    pub fn needs_source(self) -> bool {
        matches!(self, Algorithm::Dann | Algorithm::Cdan)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown adaptation algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub algorithm: Algorithm,
    pub n_target_samples: usize,
    pub labeled: bool,
    pub epochs: usize,
    /// Zero freezes the model: no optimizer steps, no batchnorm updates.
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub label_noise: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl AdaptationConfig {
    pub fn new(algorithm: Algorithm, n_target_samples: usize, seed: u64) -> Self {
        AdaptationConfig {
            algorithm,
            n_target_samples,
            labeled: algorithm.labeled(),
            epochs: 100,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: 1.0,
            label_noise: 0.0,
            seed,
            batch_size: 32,
            weight_decay: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled != self.algorithm.labeled() {
            return Err(Error::Config(format!(
                "{} requires labeled={}",
                self.algorithm,
                self.algorithm.labeled()
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label noise {} outside [0, 1]", self.label_noise)));
        }
        if self.batch_size == 0 || self.n_target_samples == 0 {
            return Err(Error::Config("batch size and target sample count must be positive".into()));
        }
        Ok(())
    }
}

pub struct LabeledBatch {
    pub windows: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn gather(d: &DomainDataset, indices: &[usize], labels: &[usize]) -> Self {
        LabeledBatch {
            windows: d.unlabeled().gather(indices),
            labels: indices.iter().map(|&i| labels[i]).collect(),
        }
    }
}

/// Windows without labels; the only target view the unsupervised steps get.
pub struct UnlabeledBatch {
    pub windows: Vec<f64>,
}

pub(crate) fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lsm = g.log_softmax(logits)?;
    let picked = g.pick(lsm, labels)?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0))
}

/// Mean prediction entropy and entropy of the mean prediction, as graph nodes.
pub fn information_terms(g: &mut Graph, logits: Var) -> Result<(Var, Var)> {
    let n = g.shape(logits)[0];
    let p = g.softmax(logits)?;
    let lp = g.log_softmax(logits)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp);
    let iu = g.scale(s, -1.0 / n as f64);
    let pm = g.mean_rows(p)?;
    let lpm = g.log(pm);
    let t = g.mul(pm, lpm)?;
    let s = g.sum(t);
    let gd = g.scale(s, -1.0);
    Ok((iu, gd))
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} loss ({v})")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub classifier: ClassifierSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 1e-4,
            classifier: ClassifierSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

const LOSS_PROBE: usize = 512;

/// Full-batch cross-entropy on the first instances of `d`, without updates.
fn probe_loss(net: &ClassifierNet, d: &DomainDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..d.len().min(LOSS_PROBE)).collect();
    let mut g = Graph::new();
    let x = net.input(&mut g, d.unlabeled().gather(&idx))?;
    let f = net.forward(&mut g, x, Mode::Train)?;
    let labels: Vec<usize> = idx.iter().map(|&i| d.label(i)).collect();
    let l = cross_entropy(&mut g, f.logits, &labels)?;
    Ok(g.value(l).data()[0])
}

/// Trains a fresh classifier on the union of `sources` with cross-entropy.
pub fn pretrain(sources: &[&DomainDataset], cfg: &PretrainConfig, seed: u64) -> Result<(ClassifierNet, PretrainReport)> {
    if sources.is_empty() {
        return Err(Error::invalid("pretrain: no source domains"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch size must be positive".into()));
    }
    let all = DomainDataset::concat("pretrain", sources)?;
    let mut net = ClassifierNet::new(&cfg.classifier, all.channels(), all.length(), all.num_classes(), seed)?;
    let ids = net.store().trainable_ids();
    let mut opt = Optimizer::adam(cfg.learning_rate)?.with_weight_decay(cfg.weight_decay);
    let initial_loss = probe_loss(&net, &all)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..all.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, &[tag("pretrain-epoch"), epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = net.input(&mut g, all.unlabeled().gather(chunk))?;
            let f = net.forward(&mut g, x, Mode::Train)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| all.label(i)).collect();
            let loss = cross_entropy(&mut g, f.logits, &labels)?;
            let l = check_finite(g.value(loss).data()[0], "pretrain")?;
            total += l * chunk.len() as f64;
            let store = net.store_mut();
            g.backward(loss, store)?;
            opt.step(store, &ids);
            f.updates.iter().for_each(|u| u.apply(store));
            store.zero_grad();
        }
        epoch_losses.push(total / all.len() as f64);
    }
    let final_loss = probe_loss(&net, &all)?;
    Ok((
        net,
        PretrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
        },
    ))
}

#[derive(Clone, Debug)]
struct Discriminator {
    hidden: Dense,
    out: Dense,
}

const DISC_HIDDEN: usize = 64;

/// A classifier being adapted, together with the state its procedure needs.
#[derive(Clone, Debug)]
pub struct Adapter {
    net: ClassifierNet,
    cfg: AdaptationConfig,
    opt: Option<Optimizer>,
    trainable: Vec<ParamId>,
    disc: Option<Discriminator>,
    centroids: Vec<Option<Vec<f64>>>,
}

impl Adapter {
    pub fn new(net: ClassifierNet, cfg: AdaptationConfig) -> Result<Self> {
        cfg.validate()?;
        let mut net = net;
        let disc = match cfg.algorithm {
            Algorithm::Dann | Algorithm::Cdan => {
                let width = match cfg.algorithm {
                    Algorithm::Cdan => net.feature_dim() * net.num_classes(),
                    _ => net.feature_dim(),
                };
                let mut rng = stream(cfg.seed, &[tag("discriminator-init")]);
                let store = net.store_mut();
                Some(Discriminator {
                    hidden: Dense::new(store, "disc.fc0", width, DISC_HIDDEN, &mut rng),
                    out: Dense::new(store, "disc.fc1", DISC_HIDDEN, 2, &mut rng),
                })
            }
            _ => None,
        };
        let trainable = match cfg.algorithm {
            Algorithm::Shot => net.store().trainable_with_prefix("fe."),
            _ => net.store().trainable_ids(),
        };
        let opt = if cfg.learning_rate > 0.0 {
            Some(Optimizer::new(cfg.optimizer, cfg.learning_rate)?.with_weight_decay(cfg.weight_decay))
        } else {
            None
        };
        let centroids = vec![None; net.num_classes()];
        Ok(Adapter {
            net,
            cfg,
            opt,
            trainable,
            disc,
            centroids,
        })
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    /// Input width of the domain discriminator, if the procedure has one.
    pub fn discriminator_inputs(&self) -> Option<usize> {
        self.disc.as_ref().map(|d| d.hidden.inputs)
    }

    pub fn optimizer(&self) -> Option<&Optimizer> {
        self.opt.as_ref()
    }

    fn apply(&mut self, g: &Graph, loss: Var, updates: &[RunningUpdate], what: &str) -> Result<f64> {
        let l = check_finite(g.value(loss).data()[0], what)?;
        let store = self.net.store_mut();
        g.backward(loss, store)?;
        if let Some(opt) = self.opt.as_mut() {
            opt.step(store, &self.trainable);
            updates.iter().for_each(|u| u.apply(store));
            if !store.all_finite() {
                return Err(Error::Numerical(format!("parameters after a {what} step")));
            }
        }
        store.zero_grad();
        Ok(l)
    }

    pub fn finetune_step(&mut self, batch: &LabeledBatch) -> Result<f64> {
        let mut g = Graph::new();
        let x = self.net.input(&mut g, batch.windows.clone())?;
        let f = self.net.forward(&mut g, x, Mode::Train)?;
        let loss = cross_entropy(&mut g, f.logits, &batch.labels)?;
        self.apply(&g, loss, &f.updates, "finetune")
    }

    pub(crate) fn adversarial_graph(
        &self,
        g: &mut Graph,
        source: Option<&LabeledBatch>,
        target: &UnlabeledBatch,
    ) -> Result<(Var, Vec<RunningUpdate>)> {
        let source = source.ok_or_else(|| Error::invalid(format!("{} requires source data", self.cfg.algorithm)))?;
        let disc = self
            .disc
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no domain discriminator", self.cfg.algorithm)))?;
        let ns = source.labels.len();
        let mut windows = source.windows.clone();
        windows.extend_from_slice(&target.windows);
        let x = self.net.input(g, windows)?;
        let n = g.shape(x)[0];
        let f = self.net.forward(g, x, Mode::Train)?;
        let src_logits = g.slice_rows(f.logits, 0, ns)?;
        let ce = cross_entropy(g, src_logits, &source.labels)?;
        let disc_in = match self.cfg.algorithm {
            Algorithm::Cdan => {
                let p = g.softmax(f.logits)?;
                let p = g.detach(p);
                g.row_outer(f.features, p)?
            }
            _ => f.features,
        };
        let rev = g.grad_reversal(disc_in, self.cfg.lambda);
        let store = self.net.store();
        let h = disc.hidden.forward(g, store, rev)?;
        let h = g.relu(h);
        let d_logits = disc.out.forward(g, store, h)?;
        let domain: Vec<usize> = (0..n).map(|i| usize::from(i >= ns)).collect();
        let dce = cross_entropy(g, d_logits, &domain)?;
        Ok((g.add(ce, dce)?, f.updates))
    }

    /// Source cross-entropy plus domain cross-entropy, with the
    /// discriminator behind a gradient reversal scaled by lambda.
    pub fn dann_step(&mut self, source: Option<&LabeledBatch>, target: &UnlabeledBatch) -> Result<f64> {
        if self.cfg.algorithm != Algorithm::Dann {
            return Err(Error::invalid(format!("dann_step called on a {} adapter", self.cfg.algorithm)));
        }
        let mut g = Graph::new();
        let (loss, updates) = self.adversarial_graph(&mut g, source, target)?;
        self.apply(&g, loss, &updates, "dann")
    }

    /// As [`dann_step`](Self::dann_step), with the discriminator reading the
    /// outer product of features and (detached) predictions.
    pub fn cdan_step(&mut self, source: Option<&LabeledBatch>, target: &UnlabeledBatch) -> Result<f64> {
        if self.cfg.algorithm != Algorithm::Cdan {
            return Err(Error::invalid(format!("cdan_step called on a {} adapter", self.cfg.algorithm)));
        }
        let mut g = Graph::new();
        let (loss, updates) = self.adversarial_graph(&mut g, source, target)?;
        self.apply(&g, loss, &updates, "cdan")
    }

    /// Information maximization plus lambda-weighted cross-entropy against
    /// centroid pseudo-labels; the head stays frozen.
    pub fn shot_step(&mut self, target: &UnlabeledBatch, pseudo: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let x = self.net.input(&mut g, target.windows.clone())?;
        let f = self.net.forward(&mut g, x, Mode::Train)?;
        let (iu, gd) = information_terms(&mut g, f.logits)?;
        let im = g.sub(iu, gd)?;
        let ce = cross_entropy(&mut g, f.logits, pseudo)?;
        let ce = g.scale(ce, self.cfg.lambda);
        let loss = g.add(im, ce)?;
        self.apply(&g, loss, &f.updates, "shot")
    }

    /// Refreshes class centroids from the current model and returns the
    /// nearest-centroid (cosine) label of every instance.
    pub fn shot_pseudo_labels(&mut self, data: Unlabeled<'_>) -> Result<Vec<usize>> {
        let (p, feats) = self.net.predict_with_features(data)?;
        let initial: Vec<usize> = (0..p.rows()).map(|i| p.argmax(i)).collect();
        let (labels, centroids) =
            nearest_centroid_labels(&feats, self.net.feature_dim(), &initial, &self.centroids)?;
        self.centroids = centroids;
        Ok(labels)
    }

    pub fn into_net(self) -> ClassifierNet {
        self.net
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Buckets rows by `initial` label, takes bucket means as centroids (a
/// bucket left empty keeps its previous centroid), then relabels every row
/// by highest cosine similarity.
pub fn nearest_centroid_labels(
    feats: &[f64],
    dim: usize,
    initial: &[usize],
    previous: &[Option<Vec<f64>>],
) -> Result<(Vec<usize>, Vec<Option<Vec<f64>>>)> {
    let k = previous.len();
    if dim == 0 || feats.len() != initial.len() * dim {
        return Err(Error::Shape {
            op: "nearest_centroid_labels",
            lhs: vec![feats.len()],
            rhs: vec![initial.len(), dim],
        });
    }
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in feats.chunks_exact(dim).zip(initial) {
        if c >= k {
            return Err(Error::invalid(format!("label {c} out of range for {k} classes")));
        }
        counts[c] += 1;
        sums[c].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let centroids: Vec<Option<Vec<f64>>> = (0..k)
        .map(|c| {
            if counts[c] > 0 {
                Some(sums[c].iter().map(|s| s / counts[c] as f64).collect())
            } else {
                previous[c].clone()
            }
        })
        .collect();
    let labels = feats
        .chunks_exact(dim)
        .map(|row| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (c, cen) in centroids.iter().enumerate() {
                if let Some(cen) = cen {
                    let s = cosine(row, cen);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
            }
            best.0
        })
        .collect();
    Ok((labels, centroids))
}

/// Per-epoch outputs of one adaptation run; index 0 is the unadapted model.
#[derive(Clone, Debug)]
pub struct AdaptationRun {
    pub matrices: Vec<PredictionMatrix>,
    pub accuracies: Vec<f64>,
    /// For each extra probe set, its prediction matrix at every epoch.
    pub probes: Vec<Vec<PredictionMatrix>>,
}

/// Relabels `round(rate * n)` randomly chosen instances to a different class.
pub fn corrupt_labels(labels: &[usize], num_classes: usize, rate: f64, seed: u64) -> Vec<usize> {
    let mut out = labels.to_vec();
    let flips = (rate * labels.len() as f64).round() as usize;
    if flips == 0 || num_classes < 2 {
        return out;
    }
    let mut rng = stream(seed, &[tag("label-noise")]);
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(flips) {
        let shift = rng.random_range(1..num_classes);
        out[i] = (labels[i] + shift) % num_classes;
    }
    out
}

/// Adapts a copy of `net` to `target_train` for `cfg.epochs` epochs,
/// recording eval-mode predictions on `target_val` (and on every probe set)
/// before training and after each epoch.
pub fn run_adaptation(
    net: &ClassifierNet,
    source: Option<&DomainDataset>,
    target_train: &DomainDataset,
    target_val: &DomainDataset,
    cfg: &AdaptationConfig,
    probes: &[Unlabeled<'_>],
) -> Result<AdaptationRun> {
    if target_val.is_empty() {
        return Err(Error::invalid("run_adaptation: empty validation set"));
    }
    if cfg.algorithm.needs_source() && source.is_none() {
        return Err(Error::invalid(format!("{} requires source data", cfg.algorithm)));
    }
    let mut adapter = Adapter::new(net.clone(), cfg.clone())?;
    let val_labels = target_val.labels();
    let mut run = AdaptationRun {
        matrices: Vec::with_capacity(cfg.epochs + 1),
        accuracies: Vec::with_capacity(cfg.epochs + 1),
        probes: vec![Vec::with_capacity(cfg.epochs + 1); probes.len()],
    };
    let record = |adapter: &Adapter, run: &mut AdaptationRun| -> Result<()> {
        let m = adapter.net().predict(target_val.unlabeled())?;
        run.accuracies.push(m.accuracy(val_labels)?);
        run.matrices.push(m);
        for (slot, probe) in run.probes.iter_mut().zip(probes) {
            slot.push(adapter.net().predict(*probe)?);
        }
        Ok(())
    };
    record(&adapter, &mut run)?;

    let train_labels = if cfg.algorithm.labeled() {
        corrupt_labels(target_train.labels(), target_train.num_classes(), cfg.label_noise, cfg.seed)
    } else {
        Vec::new()
    };
    let mut order: Vec<usize> = (0..target_train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, &[tag("adapt-epoch"), epoch as u64]);
        let pseudo = match cfg.algorithm {
            Algorithm::Shot => adapter.shot_pseudo_labels(target_train.unlabeled())?,
            _ => Vec::new(),
        };
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            match cfg.algorithm {
                Algorithm::FineTune => {
                    adapter.finetune_step(&LabeledBatch::gather(target_train, chunk, &train_labels))?;
                }
                Algorithm::Dann | Algorithm::Cdan => {
                    let src = source.expect("checked above");
                    let picks: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(0..src.len())).collect();
                    let sb = LabeledBatch::gather(src, &picks, src.labels());
                    let tb = UnlabeledBatch {
                        windows: target_train.unlabeled().gather(chunk),
                    };
                    if cfg.algorithm == Algorithm::Dann {
                        adapter.dann_step(Some(&sb), &tb)?;
                    } else {
                        adapter.cdan_step(Some(&sb), &tb)?;
                    }
                }
                Algorithm::Shot => {
                    let tb = UnlabeledBatch {
                        windows: target_train.unlabeled().gather(chunk),
                    };
                    let pl: Vec<usize> = chunk.iter().map(|&i| pseudo[i]).collect();
                    adapter.shot_step(&tb, &pl)?;
                }
            }
        }
        record(&adapter, &mut run)?;
    }
    Ok(run)
}
