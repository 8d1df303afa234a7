use dapper_core::adapt::{pretrain, Algorithm, ClassifierNet, ClassifierSpec, PretrainConfig};
use dapper_core::data::{generate_synthetic, holdout_split, standardize, DomainDataset, Heterogeneity, SyntheticConfig};
use dapper_core::eval::{run_eval_cells, similarity, EstimationTrace, EvalConfig, EvalInputs};

fn config(seed: u64, heterogeneity: Heterogeneity) -> SyntheticConfig {
    SyntheticConfig {
        domains: 3,
        num_classes: 4,
        channels: 3,
        length: 64,
        instances_per_domain: 400,
        seed,
        heterogeneity,
        ..SyntheticConfig::default()
    }
}

fn pretrain_spec() -> PretrainConfig {
    PretrainConfig {
        epochs: 8,
        classifier: ClassifierSpec {
            conv_channels: vec![8, 8],
            kernel: 5,
            stride: 2,
            dense: 16,
        },
        ..PretrainConfig::default()
    }
}

fn accuracy(net: &ClassifierNet, d: &DomainDataset) -> f64 {
    net.predict(d.unlabeled()).unwrap().accuracy(d.labels()).unwrap()
}

/// Trains on most of domain 0 and returns (accuracy on the rest of domain 0,
/// accuracy on domain 1).
fn in_and_cross_domain(seed: u64, h: Heterogeneity) -> (f64, f64) {
    let raw = generate_synthetic(&config(seed, h)).unwrap();
    let (train, val) = holdout_split(&raw[0], 0.25, seed).unwrap();
    let (data, _) = standardize(&[train.clone(), val, raw[1].clone()], &[&train]).unwrap();
    let (net, _) = pretrain(&[&data[0]], &pretrain_spec(), seed).unwrap();
    (accuracy(&net, &data[1]), accuracy(&net, &data[2]))
}

#[test]
fn without_heterogeneity_domains_are_interchangeable() {
    let (within, across) = in_and_cross_domain(11, Heterogeneity::none());
    assert!(within > 0.5, "classifier did not learn: {within}");
    assert!((within - across).abs() <= 0.05, "within {within} across {across}");
}

#[test]
fn moderate_heterogeneity_costs_accuracy_on_most_seeds() {
    let seeds = 0..5u64;
    let n = seeds.clone().count();
    let worse = seeds
        .filter(|&s| {
            let (within, across) = in_and_cross_domain(s, Heterogeneity::uniform(1.0));
            across < within
        })
        .count();
    assert!(worse * 5 >= n * 4, "{worse} of {n} seeds showed a drop");
}

#[test]
fn target_mean_is_shifted_after_source_standardization() {
    let raw = generate_synthetic(&config(3, Heterogeneity::uniform(1.0))).unwrap();
    let (data, _) = standardize(&raw, &[&raw[0]]).unwrap();
    let mean = |d: &DomainDataset| d.raw().iter().sum::<f64>() / d.raw().len() as f64;
    assert!(mean(&data[0]).abs() < 1e-9);
    assert!(mean(&data[1]).abs() > 0.0);
    assert!(mean(&data[2]).abs() > 0.0);
}

#[test]
fn same_seed_gives_identical_data() {
    let a = generate_synthetic(&config(5, Heterogeneity::uniform(1.0))).unwrap();
    let b = generate_synthetic(&config(5, Heterogeneity::uniform(1.0))).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&config(6, Heterogeneity::uniform(1.0))).unwrap();
    assert_ne!(a, c);
}

/// With identical domains the source hold-out tracks the target's accuracy
/// changes, so its similarity is close to the ground truth's (exactly 1).
#[test]
fn srclabel_matches_truth_without_domain_shift() {
    let raw = generate_synthetic(&SyntheticConfig {
        instances_per_domain: 800,
        ..config(21, Heterogeneity::none())
    })
    .unwrap();
    let (train, hold) = holdout_split(&raw[0], 0.4, 1).unwrap();
    let (data, _) = standardize(&[train.clone(), hold, raw[1].clone()], &[&train]).unwrap();
    let (net, _) = pretrain(&[&data[0]], &pretrain_spec(), 2).unwrap();
    let targets = vec![data[2].clone()];
    let inputs = EvalInputs {
        net: &net,
        source_train: &data[0],
        source_holdout: &data[1],
        targets: &targets,
    };
    let cfg = EvalConfig {
        seeds: 10,
        algorithms: vec![Algorithm::FineTune],
        epochs: 5,
        n_val: 300,
        finetune_samples: [20, 50],
        ..EvalConfig::default()
    };
    let runs = run_eval_cells(&inputs, &cfg, 9, 1).unwrap();
    let sims: Vec<f64> = runs
        .iter()
        .map(|r| {
            let truth = EstimationTrace::from_levels("TgtLabel", &r.accuracies).unwrap();
            let src = EstimationTrace::from_levels("SrcLabel", &r.source_accuracies).unwrap();
            similarity(&truth, &src).unwrap().value
        })
        .collect();
    let gap = 1.0 - sims.iter().sum::<f64>() / sims.len() as f64;
    assert_eq!(sims.len(), 10);
    assert!(gap < 0.05, "mean gap {gap}");
}
