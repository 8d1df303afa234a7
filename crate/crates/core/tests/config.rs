use dapper_core::pipeline::RunConfig;

#[test]
fn partial_tables_keep_run_defaults() {
    let cfg = RunConfig::from_toml("seed = 4\n[estimator.train]\nepochs = 7\n").unwrap();
    let def = RunConfig::default();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.estimator.train.epochs, 7);
    assert_eq!(cfg.estimator.train.learning_rate, def.estimator.train.learning_rate);
    assert_eq!(cfg.estimator.train.restarts, def.estimator.train.restarts);
    assert_eq!(cfg.simulate, def.simulate);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = RunConfig::from_toml("[estimator.train]\nepoch = 7\n").unwrap_err();
    assert!(err.to_string().contains("epoch"), "{err}");
    assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    assert!(RunConfig::from_toml("[data\n").is_err());
}

#[test]
fn snapshot_round_trips() {
    let cfg = RunConfig::default().resolved();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}
