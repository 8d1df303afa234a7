use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY: &str = r#"
[data]
targets = 1

[data.synthetic]
domains = 4
instances_per_domain = 400

[pretrain]
epochs = 5

[simulate]
episodes = 30
test_episodes = 10

[simulate.ranges]
epochs = 10
n_val = 100
unlabeled_samples = [20, 200]

[estimator]
ablations = false

[estimator.spec]
hidden = 32

[estimator.train]
epochs = 20

[evaluate]
seeds = 2
epochs = 10
n_val = 100
unlabeled_samples = [20, 200]
"#;

fn dapper(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapper"))
        .current_dir(dir)
        .env("DAPPER_OUT", dir.join("runs"))
        .args(args)
        .output()
        .expect("running dapper")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_tiny(dir: &Path) {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path());
    for out in ["a", "b"] {
        let o = dapper(tmp.path(), &["--config", "tiny.toml", "--seed", "7", "--out", out, "gen-data"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("4 domains (3 sources, 1 targets)"));
    }
    for f in ["data/domains.csv", "data/manifest.json", "config.resolved.toml"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn run_directory_is_named_by_time_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path());
    let o = dapper(tmp.path(), &["--config", "tiny.toml", "--seed", "4", "gen-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(tmp.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 1);
    let (secs, seed) = names[0].split_once('-').unwrap();
    assert!(secs.parse::<u64>().is_ok());
    assert_eq!(seed, "seed4");
    // Later stages find the newest directory for the seed.
    let o = dapper(tmp.path(), &["--seed", "4", "train-estimator"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("episode log"), "{}", stderr(&o));
    let o = dapper(tmp.path(), &["--seed", "5", "train-estimator"]);
    assert!(stderr(&o).contains("run directory for seed 5"), "{}", stderr(&o));
}

#[test]
fn missing_estimator_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path());
    let o = dapper(tmp.path(), &["--config", "tiny.toml", "--out", "r", "estimate", "--episode", "0"]);
    assert_eq!(o.status.code(), Some(5));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[missing-artifact]:"), "{err}");
    assert!(err.contains("estimator"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "[pretrain]\nepochs = 3\nlearnign_rate = 0.1\n").unwrap();
    let o = dapper(tmp.path(), &["--config", "bad.toml", "--out", "r", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));
    assert!(!tmp.path().join("r/data").exists());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path());
    let start = Instant::now();
    let base = ["--config", "tiny.toml", "--seed", "3", "--out", "run"];
    for stage in ["gen-data", "pretrain", "simulate", "train-estimator", "evaluate"] {
        let o = dapper(tmp.path(), &[&base[..], &[stage]].concat());
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert!(start.elapsed() < Duration::from_secs(300), "took {:?}", start.elapsed());

    let run = tmp.path().join("run");
    let snapshot = std::fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("seed = 3"));
    let csv = std::fs::read_to_string(run.join("eval/similarity.csv")).unwrap();
    assert!(csv.starts_with("method,domain,algorithm,similarity_pct,runs\n"));
    assert!(csv.lines().any(|l| l.starts_with("TgtLabel,all,all,100.0000,")));
    assert!(csv.lines().any(|l| l.starts_with("FixedEpoch,all,all,N/A,")));
    assert!(std::fs::read_dir(run.join("eval/curves")).unwrap().count() > 0);

    let o = dapper(tmp.path(), &["--out", "run", "estimate", "--episode", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "epoch\tdelta_estimate\taccuracy_estimate");
    assert_eq!(lines.len(), 1 + 11 + 1, "{out}");
    assert!(lines[1].starts_with("0\t0.000000\t"));
    assert!(lines.last().unwrap().starts_with("final estimated accuracy: "));
    let acc: f64 = lines.last().unwrap().rsplit(' ').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // Features from a file, without an initial accuracy.
    let log = std::fs::read_to_string(run.join("corpus/episodes.jsonl")).unwrap();
    let ep: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let mut records = ep["records"].clone();
    for r in records.as_array_mut().unwrap() {
        let r = r.as_object_mut().unwrap();
        r.remove("acc");
        r.remove("delta_acc");
    }
    std::fs::write(tmp.path().join("f.json"), records.to_string()).unwrap();
    let o = dapper(tmp.path(), &["--out", "run", "estimate", "--features", "f.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("pass --initial-accuracy"));
    let o = dapper(
        tmp.path(),
        &["--out", "run", "estimate", "--features", "f.json", "--initial-accuracy", "0.5"],
    );
    assert!(stdout(&o).contains("final estimated accuracy"));

    // Re-evaluating leaves the report byte-identical and inputs untouched.
    let data_before = std::fs::read(run.join("data/domains.csv")).unwrap();
    let report_before = std::fs::read(run.join("eval/similarity.csv")).unwrap();
    let o = dapper(tmp.path(), &["--out", "run", "evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(run.join("eval/similarity.csv")).unwrap(), report_before);
    assert_eq!(std::fs::read(run.join("data/domains.csv")).unwrap(), data_before);
}
