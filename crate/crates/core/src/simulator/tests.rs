use std::collections::BTreeSet;

use super::corpus::{predictions_path, read_predictions};
use super::*;
use crate::adapt::{ClassifierSpec, PretrainConfig};
use crate::data::{generate_synthetic, DomainDataset, Heterogeneity, SyntheticConfig};

fn small_data(domains: usize) -> Vec<DomainDataset> {
    generate_synthetic(&SyntheticConfig {
        domains,
        num_classes: 3,
        channels: 2,
        length: 32,
        instances_per_domain: 150,
        seed: 4,
        heterogeneity: Heterogeneity::uniform(1.0),
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn small_cache() -> PretrainCache {
    PretrainCache::new(
        PretrainConfig {
            epochs: 2,
            classifier: ClassifierSpec {
                conv_channels: vec![4, 4],
                kernel: 3,
                stride: 2,
                dense: 8,
            },
            ..PretrainConfig::default()
        },
        None,
    )
}

fn small_ranges() -> Randomization {
    Randomization {
        finetune_samples: [1, 10],
        unlabeled_samples: [5, 40],
        epochs: 2,
        n_val: 40,
        ..Randomization::default()
    }
}

fn ids(data: &[DomainDataset]) -> Vec<String> {
    data.iter().map(|d| d.domain_id().to_string()).collect()
}

#[test]
fn config_draw_is_deterministic() {
    let names: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
    let r = Randomization::default();
    let a = draw_episode_config(3, 17, &r, &names, 6).unwrap();
    let b = draw_episode_config(3, 17, &r, &names, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, draw_episode_config(3, 18, &r, &names, 6).unwrap());
    assert!(!a.split.sources.contains(&a.split.target));
    assert!(draw_episode_config(3, 0, &r, &names[..1], 6).is_err());
}

#[test]
fn finetune_sample_counts_cover_both_endpoints() {
    let names: Vec<String> = (0..4).map(|i| format!("d{i}")).collect();
    let r = Randomization {
        algorithms: vec![Algorithm::FineTune],
        ..Randomization::default()
    };
    let seen: BTreeSet<usize> = (0..10_000)
        .map(|i| draw_episode_config(1, i, &r, &names, 6).unwrap().adaptation.n_target_samples)
        .collect();
    assert_eq!(seen.first(), Some(&1));
    assert_eq!(seen.last(), Some(&50));
}

#[test]
fn point_mass_ranges_give_that_point() {
    let names: Vec<String> = (0..4).map(|i| format!("d{i}")).collect();
    let r = Randomization {
        algorithms: vec![Algorithm::Cdan],
        unlabeled_samples: [77, 77],
        learning_rate: [3e-3, 3e-3],
        sgd_probability: 0.0,
        lambdas: vec![0.5],
        imbalance_probability: 0.0,
        ..Randomization::default()
    };
    for i in 0..20 {
        let c = draw_episode_config(9, i, &r, &names, 6).unwrap();
        assert_eq!(c.adaptation.algorithm, Algorithm::Cdan);
        assert_eq!(c.adaptation.n_target_samples, 77);
        assert_eq!(c.adaptation.learning_rate, 3e-3);
        assert_eq!(c.adaptation.optimizer, crate::kernel::OptimizerKind::Adam);
        assert_eq!(c.adaptation.lambda, 0.5);
        assert_eq!(c.imbalance, None);
    }
}

#[test]
fn few_domains_split_within_a_domain() {
    let data = small_data(3);
    let split = VirtualSplit::draw(&ids(&data), 1);
    assert!(split.within_domain);
    let (src, tgt) = split.materialize(&data, 5).unwrap();
    assert_eq!(src.len(), 3);
    assert_eq!(src[2].len() + tgt.len(), data[1].len());
    let whole = VirtualSplit::draw(&ids(&small_data(4)), 0);
    assert!(!whole.within_domain);
    assert_eq!(whole.sources.len(), 3);
}

#[test]
fn frozen_episode_has_no_change() {
    let data = small_data(4);
    let mut cfg = draw_episode_config(2, 0, &small_ranges(), &ids(&data), 3).unwrap();
    cfg.adaptation = AdaptationConfig::new(Algorithm::FineTune, 10, cfg.seed);
    cfg.adaptation.epochs = 1;
    cfg.adaptation.learning_rate = 0.0;
    let out = run_episode(&data, &cfg, &small_cache(), false).unwrap();
    let r = &out.episode.records;
    assert_eq!(r.len(), 2);
    assert_eq!(r[1].delta_acc, Some(0.0));
    assert_eq!((r[1].dgd, r[1].diu), (0.0, 0.0));
    assert!(r[1].dpd.iter().all(|&v| v == 0.0));
}

#[test]
fn poisoned_target_labels_leave_features_unchanged() {
    let data = small_data(4);
    let mut cfg = draw_episode_config(2, 1, &small_ranges(), &ids(&data), 3).unwrap();
    cfg.adaptation = AdaptationConfig::new(Algorithm::Shot, 30, cfg.seed);
    cfg.adaptation.epochs = 2;
    cfg.imbalance = None;
    let clean = run_episode(&data, &cfg, &small_cache(), false).unwrap().episode;

    let poisoned: Vec<DomainDataset> = data
        .iter()
        .map(|d| {
            if d.domain_id() == cfg.split.target {
                let flipped = d.labels().iter().map(|&y| (y + 1) % 3).collect();
                d.with_labels(flipped).unwrap()
            } else {
                d.clone()
            }
        })
        .collect();
    let dirty = run_episode(&poisoned, &cfg, &small_cache(), false).unwrap().episode;
    for (a, b) in clean.records.iter().zip(&dirty.records) {
        assert_eq!((a.gd, a.iu, &a.pd), (b.gd, b.iu, &b.pd));
    }
    assert_ne!(
        clean.records.iter().map(|r| r.acc).collect::<Vec<_>>(),
        dirty.records.iter().map(|r| r.acc).collect::<Vec<_>>()
    );
}

#[test]
fn corpus_resumes_and_ignores_scheduling() {
    let data = small_data(4);
    let dir = tempfile::tempdir().unwrap();
    let cache = small_cache();
    let ranges = small_ranges();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let request = |path: &'static str, n: usize, workers: usize| CorpusRequest {
        data: &data,
        ranges: &ranges,
        n_episodes: n,
        first_index: 0,
        master_seed: 11,
        workers,
        log_path: if path == "a" { &a } else { &b },
        cache: &cache,
        predictions_dir: Some(dir.path()),
        record_timing: false,
    };
    assert!(generate_corpus(&request("a", 0, 1)).is_err());
    let rep = generate_corpus(&request("a", 4, 1)).unwrap();
    assert_eq!((rep.generated, rep.already_present), (4, 0));
    let first = std::fs::read_to_string(&a).unwrap();
    let rep = generate_corpus(&request("a", 7, 2)).unwrap();
    assert_eq!((rep.generated, rep.already_present), (3, 4));
    let resumed = std::fs::read_to_string(&a).unwrap();
    assert!(resumed.starts_with(&first));
    let log = read_log(&a).unwrap();
    assert_eq!(log.iter().map(|e| e.episode_index).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());

    generate_corpus(&request("b", 7, 3)).unwrap();
    assert_eq!(std::fs::read_to_string(&b).unwrap(), resumed);

    // Recompute logged features from stored predictions.
    for ep in log.iter().filter(|e| e.is_ok()) {
        let mats = read_predictions(&predictions_path(dir.path(), ep.episode_index)).unwrap();
        let again = crate::features::build_feature_sequence(&mats, None).unwrap();
        for (x, y) in ep.records.iter().zip(&again) {
            assert!((x.gd - y.gd).abs() < 1e-12 && (x.iu - y.iu).abs() < 1e-12);
            assert!((x.dgd - y.dgd).abs() < 1e-12 && (x.diu - y.diu).abs() < 1e-12);
            for (p, q) in x.pd.iter().zip(&y.pd).chain(x.dpd.iter().zip(&y.dpd)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn partial_tail_ignored_and_schema_checked() {
    let data = small_data(4);
    let dir = tempfile::tempdir().unwrap();
    let cache = small_cache();
    let ranges = small_ranges();
    let path = dir.path().join("log.jsonl");
    let req = CorpusRequest {
        data: &data,
        ranges: &ranges,
        n_episodes: 2,
        first_index: 0,
        master_seed: 1,
        workers: 1,
        log_path: &path,
        cache: &cache,
        predictions_dir: None,
        record_timing: false,
    };
    generate_corpus(&req).unwrap();
    let good = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("{good}{{\"schema_version\": 1, \"epis")).unwrap();
    assert_eq!(read_log(&path).unwrap().len(), 2);
    generate_corpus(&req).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), good);

    let bumped = good.replacen("\"schema_version\":1", "\"schema_version\":9", 1);
    std::fs::write(&path, bumped).unwrap();
    match generate_corpus(&req) {
        Err(crate::Error::Version { found: 9, expected: 1, .. }) => {}
        other => panic!("expected a version error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn split_pool_sizes_vary_within_bounds() {
    let names: Vec<String> = (0..6).map(|i| format!("d{i}")).collect();
    let r = Randomization {
        min_virtual_sources: 3,
        split_pool: 40,
        ..Randomization::default()
    };
    let mut sizes = BTreeSet::new();
    let mut splits = BTreeSet::new();
    for i in 0..300 {
        let s = draw_episode_config(9, i, &r, &names, 6).unwrap().split;
        assert!(!s.within_domain);
        assert!((3..=5).contains(&s.sources.len()), "{:?}", s.sources);
        assert!(!s.sources.contains(&s.target));
        let distinct: BTreeSet<_> = s.sources.iter().collect();
        assert_eq!(distinct.len(), s.sources.len());
        sizes.insert(s.sources.len());
        splits.insert((s.target.clone(), s.sources.clone()));
    }
    assert_eq!(sizes.len(), 3);
    // Episodes draw from a fixed pool, so splits repeat.
    assert!(splits.len() <= 40);
}

#[test]
fn disjoint_index_ranges_share_the_split_pool() {
    let names: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
    let r = Randomization {
        split_pool: 4,
        ..Randomization::default()
    };
    let pool = |range: std::ops::Range<u64>| -> BTreeSet<(String, Vec<String>)> {
        range
            .map(|i| {
                let s = draw_episode_config(2, i, &r, &names, 6).unwrap().split;
                (s.target, s.sources)
            })
            .collect()
    };
    assert_eq!(pool(0..200), pool(1 << 32..(1 << 32) + 200));
}
