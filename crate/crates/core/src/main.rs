use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use dapper_core::error::Category;
use dapper_core::features::FeatureRecord;
use dapper_core::pipeline::{self, RunConfig, RunDir};
use dapper_core::{Error, Result};

/// Environment variable naming the default output root.
const OUT_ROOT_VAR: &str = "DAPPER_OUT";

#[derive(Parser)]
#[command(name = "dapper", version, about = "Estimate post-adaptation accuracy without target labels")]
struct Cli {
    /// TOML run configuration. Defaults to the run directory's snapshot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory. Without it a directory named by time and seed is
    /// created (gen-data, run) or the newest one for the seed is reused.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Number of simulated episodes.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Adaptation epochs of simulated and evaluated runs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the domain datasets.
    GenData,
    /// Train the source classifier.
    Pretrain,
    /// Simulate adaptation episodes on virtual source/target splits.
    Simulate,
    /// Train the accuracy estimator on the episode corpus.
    TrainEstimator,
    /// Estimate accuracy change for one run's features.
    Estimate {
        /// Episode index in the run's corpus.
        #[arg(long, conflicts_with = "features")]
        episode: Option<u64>,
        /// JSON array or JSON lines of per-epoch feature records.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Accuracy before adaptation; read from the records when present.
        #[arg(long)]
        initial_accuracy: Option<f64>,
    },
    /// Adapt to each target and report estimation similarity per method.
    Evaluate,
    /// All stages in order.
    Run,
}

impl Command {
    fn creates_run(&self) -> bool {
        matches!(self, Command::GenData | Command::Run)
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn newest_run(root: &Path, seed: u64) -> Result<PathBuf> {
    let suffix = format!("-seed{seed}");
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
    entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(&suffix))
        .max()
        .map(|n| root.join(n))
        .ok_or_else(|| Error::MissingArtifact(format!("run directory for seed {seed} under {}", root.display())))
}

fn resolve(cli: &Cli) -> Result<(RunConfig, RunDir)> {
    let from_file = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let given_seed = cli.seed.or(from_file.as_ref().map(|c| c.seed));
    let seed = given_seed.unwrap_or(0);
    let dir = match &cli.out {
        Some(d) => d.clone(),
        None if cli.command.creates_run() => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            out_root().join(format!("{secs}-seed{seed}"))
        }
        None => newest_run(&out_root(), seed)?,
    };
    let run = RunDir::new(dir);
    let mut cfg = match from_file {
        Some(c) => c,
        None if run.config().exists() => RunConfig::load(&run.config())?,
        None => RunConfig::default(),
    };
    // A run directory's snapshot keeps its own seed unless one is given.
    if let Some(s) = given_seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(n) = cli.episodes {
        cfg.simulate.episodes = n;
    }
    if let Some(t) = cli.epochs {
        cfg.set_epochs(t);
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok((cfg, run))
}

fn read_records(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parsed = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    };
    parsed.map_err(|e| Error::InvalidInput(format!("feature records in {}: {e}", path.display())))
}

fn estimate(run: &RunDir, episode: Option<u64>, features: Option<&Path>, initial: Option<f64>) -> Result<()> {
    let net = pipeline::load_estimator(run, "dapper")?;
    let records = match (episode, features) {
        (_, Some(p)) => read_records(p)?,
        (Some(i), None) => pipeline::load_corpus(run)?
            .into_iter()
            .find(|e| e.episode_index == i)
            .ok_or_else(|| Error::MissingArtifact(format!("episode {i} in the episode log")))?
            .records,
        (None, None) => return Err(Error::InvalidInput("estimate needs --episode or --features".into())),
    };
    let a0 = initial.or_else(|| records.first().and_then(|r| r.acc));
    let est = pipeline::estimate_records(&net, &records, a0)?;
    println!("epoch\tdelta_estimate\taccuracy_estimate");
    for (e, d) in est.delta.iter().enumerate() {
        match &est.accuracy {
            Some(a) => println!("{e}\t{d:.6}\t{:.6}", a[e]),
            None => println!("{e}\t{d:.6}\t-"),
        }
    }
    match est.accuracy.as_ref().and_then(|a| a.last()) {
        Some(a) => println!("final estimated accuracy: {a:.6}"),
        None => println!("final estimated change: {:.6} (pass --initial-accuracy for accuracy)", est.delta.last().unwrap()),
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let (cfg, run) = resolve(&cli)?;
    std::fs::create_dir_all(run.root()).map_err(|e| Error::io(format!("creating {}", run.root().display()), e))?;
    run.write_config(&cfg)?;
    match cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&cfg, &run)?;
            println!(
                "{} domains ({} sources, {} targets), sha256 {}",
                m.domains.len(),
                m.sources.len(),
                m.targets.len(),
                m.sha256
            );
        }
        Command::Pretrain => {
            let m = pipeline::pretrain_stage(&cfg, &run)?;
            println!("source hold-out accuracy {:.4}", m.holdout_accuracy);
            for (t, a) in &m.target_accuracies {
                println!("target {t} accuracy {a:.4}");
            }
        }
        Command::Simulate => {
            let r = pipeline::simulate_stage(&cfg, &run)?;
            for (what, r) in [("training", Some(&r.train)), ("test", r.test.as_ref())] {
                if let Some(r) = r {
                    println!(
                        "{what}: {} episodes requested, {} already present, {} generated, {} failed",
                        r.requested, r.already_present, r.generated, r.failed
                    );
                }
            }
        }
        Command::TrainEstimator => {
            for e in pipeline::train_estimator_stage(&cfg, &run)? {
                println!(
                    "{}: {} params, best validation loss {:.6} at epoch {}",
                    e.name, e.num_params, e.report.best_val_loss, e.report.best_epoch
                );
            }
        }
        Command::Estimate {
            episode,
            features,
            initial_accuracy,
        } => estimate(&run, episode, features.as_deref(), initial_accuracy)?,
        Command::Evaluate | Command::Run => {
            let out = if matches!(cli.command, Command::Run) {
                pipeline::run_all(&cfg, &run)?
            } else {
                pipeline::evaluate_stage(&cfg, &run)?
            };
            for m in &out.report.summary.methods {
                match m.mean {
                    Some(v) => println!("{:<28} {v:.2}", m.method),
                    None => println!("{:<28} N/A", m.method),
                }
            }
            println!("report written to {}", run.eval_dir().display());
        }
    }
    Ok(())
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Config => 3,
        Category::InvalidInput => 4,
        Category::MissingArtifact => 5,
        Category::Io => 6,
        Category::Format => 7,
        Category::Version => 8,
        Category::Shape => 9,
        Category::Numerical => 10,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
