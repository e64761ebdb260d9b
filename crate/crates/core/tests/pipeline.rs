use drivesig_core::data::{Area, ChannelGroup, ChannelSelection, Dataset, Split};
use drivesig_core::pipeline::{self as pl, PipelineError, Prepared, RunConfig};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 5
[data.synth]
drivers = 4
durations_s = [["urban", 40.0], ["highway", 40.0]]
[windowing]
interval_length_s = 2.0
interval_gap_s = 1.0
[encoder]
kernel_size = 4
levels = 6
hidden_channels = 4
tcn_embedding = 4
wavelet_embedding_per_branch = 2
[training]
epochs = 1
batch_size = 4
[gbdt]
num_trees = 5
[eval]
group_sizes = [2, 3]
"#,
    )
    .unwrap();
    cfg = cfg.resolve();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn config_round_trips_and_propagates_seed() {
    let cfg = tiny();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(
        (cfg.training.seed, cfg.gbdt.seed, cfg.eval.seed, cfg.project.tsne.seed),
        (5, 5, 5, 5)
    );
    let def = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&def.to_toml()).unwrap(), def);
    assert!(matches!(
        RunConfig::from_toml("[training]\nbogus = 1\n"),
        Err(PipelineError::Config(_))
    ));
}

#[test]
fn saved_model_scores_like_the_trained_one() {
    let cfg = tiny();
    let prepared = Prepared::new(pl::load_or_generate(&cfg.data).unwrap(), &cfg.windowing).unwrap();
    let ds = &prepared.dataset;
    let trained = pl::train_model(&cfg, ds).unwrap();
    assert_eq!(trained.history.len(), 1);

    let dir = tempfile::tempdir().unwrap();
    let manifest = pl::save_trained(dir.path(), &trained, &prepared).unwrap();
    assert_eq!(manifest.windows_per_split["test"], ds.split(Split::Test).len());
    assert_eq!(manifest.drivers.len(), 4);

    let (model, normalizer) = pl::load_trained(dir.path()).unwrap();
    assert_eq!(normalizer, prepared.normalizer);
    let rebuilt = pl::dataset_with(&cfg, &normalizer).unwrap();
    let test = rebuilt.split(Split::Test);
    assert_eq!(
        model.predict_proba(test).unwrap(),
        trained.model.predict_proba(test).unwrap()
    );

    let report = pl::evaluate(&model, &rebuilt, &cfg.eval).unwrap();
    for (d, row) in report.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<u64>(), report.windows_per_driver[d]);
    }
    assert_eq!(report.nway.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
    assert!(report.nway.values().all(|a| (0.0..=1.0).contains(a)));
    assert_eq!(report.nota.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
    assert!(report.nota.values().all(|r| (0.0..=1.0).contains(&r.accuracy)));

    let points = pl::project(&model, &rebuilt, &cfg.project).unwrap();
    assert_eq!(points.len(), test.len());
}

#[test]
fn missing_artifacts_are_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    match pl::load_trained(dir.path()) {
        Err(PipelineError::MissingArtifact(p)) => assert!(p.ends_with(pl::CHECKPOINT_FILE)),
        other => panic!("expected a missing artifact, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn written_synthetic_data_loads_back() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let manifest = pl::write_synthetic(&cfg.data.synth, dir.path()).unwrap();
    let mut from_files = cfg.data.clone();
    from_files.manifest = Some(manifest);
    let loaded = pl::load_or_generate(&from_files).unwrap();
    let generated = pl::load_or_generate(&cfg.data).unwrap();
    assert_eq!(loaded.len(), generated.len());
    for (a, b) in loaded.iter().zip(&generated) {
        assert_eq!((&a.driver, a.area, a.num_frames()), (&b.driver, b.area, b.num_frames()));
        assert_eq!(a.channel_names(), b.channel_names());
        for c in 0..a.num_channels() {
            let worst = a
                .channel(c)
                .iter()
                .zip(b.channel(c))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(
                worst <= 1e-6 * (1.0 + b.channel(c).iter().fold(0.0f64, |m, v| m.max(v.abs()))),
                "channel {c}"
            );
        }
    }
    assert!(loaded.iter().any(|r| r.area == Area::Highway));
}

#[test]
fn ablation_selections_cover_every_sensor_group() {
    let cfg = tiny();
    let raw = Dataset::build(pl::load_or_generate(&cfg.data).unwrap(), &cfg.windowing).unwrap();
    let sels = pl::ablation_selections(&raw);
    assert!(!sels.contains(&ChannelSelection::Remove(vec![ChannelGroup::Uncategorized])));
    assert_eq!(sels.last(), Some(&ChannelSelection::All));
    let removals = sels.iter().filter(|s| matches!(s, ChannelSelection::Remove(_))).count();
    assert_eq!(removals, ChannelGroup::ALL.len() - 1);
    let kept = raw
        .mask_groups(&ChannelSelection::KeepOnly(vec![
            ChannelGroup::Speed,
            ChannelGroup::Acceleration,
        ]))
        .unwrap();
    assert!(kept.num_channels() < raw.num_channels());
    assert_eq!(kept.split(Split::Train).len(), raw.split(Split::Train).len());
}
