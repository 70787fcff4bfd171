use std::collections::{BTreeMap, HashMap};

use harood_core::data::mock::mock_recordings;
use harood_core::data::normalize::{NormalizationMode, NormalizationSpec};
use harood_core::data::registry::DatasetId;
use harood_core::data::window::sliding_window;
use harood_core::data::RawRecording;
use harood_core::scenario::{build_scenario, InMemory, ScenarioKind, ScenarioSpec};
use harood_core::HaroodError;

fn raw() -> NormalizationSpec {
    NormalizationSpec {
        mode: NormalizationMode::None,
        ..Default::default()
    }
}

fn source(datasets: &[DatasetId], windows: usize) -> InMemory {
    InMemory(datasets.iter().map(|&d| (d, mock_recordings(d, windows, 5).unwrap())).collect())
}

#[test]
fn cross_position_splits_every_window_into_five_blocks() {
    let src = source(&[DatasetId::Dsads], 2);
    let spec = ScenarioSpec::default_for(ScenarioKind::CrossPosition, DatasetId::Dsads)
        .unwrap()
        .with_normalization(raw());
    let bundle = build_scenario(&src, &spec).unwrap();
    assert_eq!(bundle.domain_count(), 5);

    let mut originals = Vec::new();
    for r in &src.0[&DatasetId::Dsads] {
        originals.extend(sliding_window(r.stream(), &spec.windowing, r.activity_label, 0).unwrap());
    }
    for d in &bundle.domains {
        assert_eq!(d.len(), originals.len());
        assert_eq!(d.shape(), [9, 1, spec.windowing.window_length]);
    }
    assert_eq!(bundle.total_windows(), 5 * originals.len());
    for (i, w) in originals.iter().enumerate() {
        let joined: Vec<f64> = bundle
            .domains
            .iter()
            .flat_map(|d| d.windows()[i].values().iter().copied())
            .collect();
        assert_eq!(joined, w.values(), "window {i}");
        assert!(bundle.domains.iter().all(|d| d.windows()[i].label == w.label));
    }
}

#[test]
fn cross_time_quarters_are_chronological() {
    let ds = DatasetId::Emg;
    let spec = ScenarioSpec::default_for(ScenarioKind::CrossTime, ds)
        .unwrap()
        .with_normalization(raw());
    let c = spec.windowing.channel_count;
    let n_windows = 11;
    let steps = spec.windowing.window_length + (n_windows - 1) * spec.windowing.step;
    let stream: Vec<f64> = (0..steps).flat_map(|t| (0..c).map(move |ch| t as f64 + ch as f64 * 1e-3)).collect();
    let rec = RawRecording::new(stream, c, 0, 1, BTreeMap::new()).unwrap();
    let src = InMemory(HashMap::from([(ds, vec![rec])]));
    let bundle = build_scenario(&src, &spec).unwrap();

    let sizes: Vec<usize> = bundle.domains.iter().map(|d| d.len()).collect();
    assert_eq!(sizes, vec![3, 3, 3, 2]);
    let starts: Vec<f64> = bundle
        .domains
        .iter()
        .flat_map(|d| d.windows().iter().map(|w| w.channel(0)[0]))
        .collect();
    assert!(starts.windows(2).all(|p| p[0] < p[1]), "{starts:?}");
    for d in &bundle.domains {
        let ts: Vec<usize> = d.windows().iter().map(|w| w.timestamp_index).collect();
        assert!(ts.windows(2).all(|p| p[0] < p[1]), "{ts:?}");
    }
}

#[test]
fn overlapping_split_groups_are_rejected() {
    let src = source(&[DatasetId::Dsads], 1);
    let mut spec = ScenarioSpec::default_for(ScenarioKind::CrossPerson, DatasetId::Dsads).unwrap();
    spec.split_table[1].push(0);
    let err = build_scenario(&src, &spec).unwrap_err();
    assert!(matches!(err, HaroodError::Split(_)), "{err}");
}

#[test]
fn cross_dataset_uses_the_shared_label_space() {
    let datasets = [DatasetId::Dsads, DatasetId::Uschad, DatasetId::Ucihar, DatasetId::Pamap2];
    let src = source(&datasets, 1);
    let spec = ScenarioSpec::cross_dataset_default().unwrap();
    let bundle = build_scenario(&src, &spec).unwrap();
    assert_eq!(bundle.domain_count(), 4);
    assert_eq!(bundle.shape(), [6, 1, 50]);
    for d in &bundle.domains {
        let hist = d.class_histogram();
        assert_eq!(hist.len(), 6);
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
    }
}

#[test]
fn cross_person_accounts_for_every_window() {
    for ds in [DatasetId::Dsads, DatasetId::Uschad, DatasetId::Pamap2] {
        let src = source(&[ds], 3);
        let spec = ScenarioSpec::default_for(ScenarioKind::CrossPerson, ds).unwrap();
        let bundle = build_scenario(&src, &spec).unwrap();
        let grouped: Vec<usize> = spec.split_table.iter().flatten().copied().collect();
        let expected: usize = src.0[&ds]
            .iter()
            .filter(|r| grouped.contains(&r.subject_id))
            .map(|r| spec.windowing.count(r.time_steps()))
            .sum();
        let per_domain: usize = bundle.domains.iter().map(|d| d.len()).sum();
        assert_eq!(per_domain, bundle.total_windows());
        assert_eq!(per_domain, expected, "{ds:?}");
    }
}

#[test]
fn rebuilding_gives_the_same_bundle() {
    let src = source(&[DatasetId::Wesad], 4);
    let spec = ScenarioSpec::default_for(ScenarioKind::CrossTime, DatasetId::Wesad).unwrap();
    assert_eq!(build_scenario(&src, &spec).unwrap(), build_scenario(&src, &spec).unwrap());
}

#[test]
fn unsupported_pairs_are_config_errors() {
    let err = ScenarioSpec::default_for(ScenarioKind::CrossPosition, DatasetId::Emg).unwrap_err();
    assert!(matches!(err, HaroodError::Config(_)), "{err}");
}
