use std::collections::BTreeMap;
use std::path::Path;

use harood_core::data::synthetic::{make_synthetic_suite, SyntheticShiftSpec};
use harood_core::eval::{run_grid, select, Grid, GridSpec, HyperParams, RunRecord, SelectionKind};
use harood_core::nn::backbone::BackboneConfig;
use harood_core::runner::{
    emit_report, parse_config, parse_overrides, persist_results, train_entry, ConfigSource, ResultsStore, RunConfig,
    RunKey,
};
use harood_core::HaroodError;
use serde_json::json;

const LISTING: &str = "algorithm: 'ERM'
batch_size: 32
lr: 0.01
test_envs: [0]
output: 'output'
max_epoch: 150
task: 'cross_people'
dataset: 'dsads'
";

fn write_listing(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("test.yaml");
    std::fs::write(&p, LISTING).unwrap();
    p
}

#[test]
fn listing_file_parses_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(ConfigSource::File(&write_listing(dir.path())), &[]).unwrap();
    assert_eq!(cfg.algorithm, "ERM");
    assert_eq!(cfg.batch_size, 32);
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.test_envs, Some(vec![0]));
    assert_eq!(cfg.output, Path::new("output"));
    assert_eq!(cfg.max_epoch, 150);
    assert_eq!(cfg.task, "cross_people");
    assert_eq!(cfg.dataset, "dsads");
}

#[test]
fn overrides_beat_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = parse_overrides(&["lr=2e-3", "max_epoch=200"]).unwrap();
    let cfg = parse_config(ConfigSource::File(&write_listing(dir.path())), &o).unwrap();
    assert_eq!(cfg.lr, 2e-3);
    assert_eq!(cfg.max_epoch, 200);
    assert_eq!(cfg.batch_size, 32);
}

#[test]
fn json_and_yaml_files_agree() {
    let dir = tempfile::tempdir().unwrap();
    let yaml = parse_config(ConfigSource::File(&write_listing(dir.path())), &[]).unwrap();
    let p = dir.path().join("test.json");
    std::fs::write(
        &p,
        r#"{"algorithm": "ERM", "batch_size": 32, "lr": 0.01, "test_envs": [0], "output": "output",
            "max_epoch": 150, "task": "cross_people", "dataset": "dsads"}"#,
    )
    .unwrap();
    assert_eq!(parse_config(ConfigSource::File(&p), &[]).unwrap(), yaml);
}

#[test]
fn config_survives_a_yaml_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        ConfigSource::Mapping(json!({
            "algorithm": "Fishr", "grid": {"lr": [0.01], "batch_size": [16, 32]},
            "algorithm_config": {"penalty_weight": 0.3}, "seed": 9, "protocol": "oracle"
        })),
        &[],
    )
    .unwrap();
    let p = dir.path().join("round.yaml");
    std::fs::write(&p, cfg.to_yaml().unwrap()).unwrap();
    assert_eq!(RunConfig::from_file(&p).unwrap(), cfg);
}

#[test]
fn unknown_algorithm_is_a_registry_error() {
    let err = parse_config(ConfigSource::Mapping(json!({"algorithm": "SuperDG"})), &[]).unwrap_err();
    assert!(matches!(err, HaroodError::Registry(_)), "{err}");
}

#[test]
fn unknown_keys_are_listed_together() {
    let msg = parse_config(ConfigSource::Mapping(json!({"epochs": 3, "learning_rate": 0.1})), &[])
        .unwrap_err()
        .to_string();
    assert!(msg.contains("epochs") && msg.contains("learning_rate"), "{msg}");
}

fn synthetic(domains: usize) -> serde_json::Value {
    json!({
        "domain_count": domains, "class_count": 2, "channels": 1, "length": 16,
        "samples_per_class_per_domain": 6, "noise_std": 0.2, "seed": 3
    })
}

#[test]
fn test_envs_restrict_the_held_out_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        ConfigSource::Mapping(json!({
            "output": dir.path(), "test_envs": [0], "max_epoch": 1, "trials": 1,
            "synthetic": synthetic(3), "deterministic": true
        })),
        &[],
    )
    .unwrap();
    let summary = train_entry(&cfg).unwrap();
    assert_eq!(summary.records, 1);
    assert_eq!(summary.tasks.len(), 1);
    assert!(summary.files.iter().all(|f| f.contains("target0_")), "{:?}", summary.files);

    let bad = parse_config(
        ConfigSource::Mapping(json!({"output": dir.path(), "test_envs": [7], "synthetic": synthetic(3)})),
        &[],
    );
    let err = bad.and_then(|c| train_entry(&c)).unwrap_err();
    assert!(matches!(err, HaroodError::Config(_)), "{err}");
}

fn tiny_records(algorithm: &str, grid: Grid, trials: usize) -> Vec<RunRecord> {
    let domains = make_synthetic_suite(&SyntheticShiftSpec {
        domain_count: 4,
        class_count: 2,
        channels: 1,
        length: 16,
        amplitude_shift: SyntheticShiftSpec::amplitude_ladder(4, 0.3),
        noise_std: 0.3,
        samples_per_class_per_domain: 5,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let mut spec = GridSpec::new(algorithm, BackboneConfig::cnn(domains[0].shape()), grid);
    spec.trials = trials;
    spec.max_epoch = 2;
    spec.deterministic = true;
    spec.scenario = "synthetic".into();
    spec.dataset = "synthetic".into();
    run_grid(&domains, &spec).unwrap()
}

#[test]
fn full_grid_persists_one_file_per_run() {
    let records = tiny_records("ERM", Grid::default_grid(), 3);
    assert_eq!(records.len(), 240);
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let paths = persist_results(&store, &records).unwrap();
    assert_eq!(paths.len(), 240);
    assert_eq!(store.run_files().len(), 240);
    let a = store.rebuild_index().unwrap();
    let b = store.rebuild_index().unwrap();
    assert_eq!(a, b);
    assert_eq!(a.runs.len(), 240);
    assert_eq!(store.load_latest().unwrap().len(), 240);
}

#[test]
fn rewriting_a_run_adds_a_version() {
    let records = tiny_records("ERM", Grid::single(HyperParams { lr: 0.01, batch_size: 8 }), 1);
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let first = store.persist(&records[0]).unwrap();
    let before = std::fs::read(&first).unwrap();
    let mut changed = records[0].clone();
    changed.final_metrics.target_acc = 0.123;
    let second = store.persist(&changed).unwrap();
    assert_ne!(first, second);
    assert!(second.to_string_lossy().ends_with(".v2.jsonl"), "{}", second.display());
    assert_eq!(std::fs::read(&first).unwrap(), before);
    let (latest, version) = store.latest(&RunKey::of(&records[0])).unwrap();
    assert_eq!((latest.as_path(), version), (second.as_path(), 2));
    assert_eq!(ResultsStore::load(&latest).unwrap(), changed);
}

#[test]
fn empty_store_cannot_report() {
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let err = emit_report(&store, SelectionKind::TrainingDomainValidation, None).unwrap_err();
    assert!(matches!(err, HaroodError::Report(_)), "{err}");
}

fn brute_ranks(column: &[f64]) -> Vec<f64> {
    column
        .iter()
        .map(|&v| {
            let above = column.iter().filter(|&&w| w > v).count() as f64;
            let same = column.iter().filter(|&&w| w == v).count() as f64;
            above + (same + 1.0) / 2.0
        })
        .collect()
}

#[test]
fn report_ranks_match_independent_selection() {
    let grid = Grid::product(&[0.01, 0.05], &[8]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let mut by_alg: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for alg in ["CORAL", "ERM", "VREx"] {
        let rs = tiny_records(alg, grid.clone(), 2);
        persist_results(&store, &rs).unwrap();
        by_alg.insert(alg, rs);
    }
    for protocol in [SelectionKind::TrainingDomainValidation, SelectionKind::Oracle] {
        let files = emit_report(&store, protocol, None).unwrap();
        let mut reader = csv::Reader::from_path(files.dir.join("ranks.csv")).unwrap();
        let headers = reader.headers().unwrap().clone();
        let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
        let (ai, ti, ri) = (col("algorithm"), col("task"), col("rank"));
        let mut got: BTreeMap<(String, String), f64> = BTreeMap::new();
        for row in reader.records() {
            let row = row.unwrap();
            got.insert((row[ai].to_string(), row[ti].to_string()), row[ri].parse().unwrap());
        }

        let selections: Vec<(&str, Vec<_>)> =
            by_alg.iter().map(|(a, rs)| (*a, select(rs, protocol).unwrap())).collect();
        let tasks: Vec<String> = selections[0].1.iter().map(|s| s.task.clone()).collect();
        assert_eq!(got.len(), tasks.len() * selections.len());
        for task in &tasks {
            let column: Vec<f64> = selections
                .iter()
                .map(|(_, sels)| sels.iter().find(|s| &s.task == task).unwrap().accuracy)
                .collect();
            for ((alg, _), want) in selections.iter().zip(brute_ranks(&column)) {
                assert_eq!(got[&(alg.to_string(), task.clone())], want, "{protocol:?} {alg} {task}");
            }
        }
        for name in ["accuracy.csv", "rank_sums.csv", "timing.csv", "report.md"] {
            assert!(files.dir.join(name).is_file(), "{name}");
        }
    }
}
