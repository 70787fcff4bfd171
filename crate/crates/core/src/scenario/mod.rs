//! The four domain-shift scenarios and leave-one-domain-out task enumeration.

pub mod bundle_io;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::cache::read_cache;
use crate::data::normalize::{normalize, NormalizationSpec};
use crate::data::registry::DatasetId;
use crate::data::window::{downsample, sliding_window, WindowingSpec};
use crate::data::{DomainDataset, RawRecording, SensorWindow};
use crate::error::{HaroodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[serde(alias = "cross_people")]
    CrossPerson,
    CrossPosition,
    CrossDataset,
    CrossTime,
}

impl ScenarioKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_lowercase().replace('-', "_").as_str() {
            "cross_person" | "cross_people" => Ok(ScenarioKind::CrossPerson),
            "cross_position" => Ok(ScenarioKind::CrossPosition),
            "cross_dataset" => Ok(ScenarioKind::CrossDataset),
            "cross_time" => Ok(ScenarioKind::CrossTime),
            _ => Err(HaroodError::Config(format!("unknown scenario '{name}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CrossPerson => "cross_person",
            ScenarioKind::CrossPosition => "cross_position",
            ScenarioKind::CrossDataset => "cross_dataset",
            ScenarioKind::CrossTime => "cross_time",
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared activities of the cross-dataset scenario, in class-index order.
pub const SHARED_ACTIVITIES: [&str; 6] = ["walking", "upstairs", "downstairs", "sitting", "standing", "lying"];

/// Sensors and label mapping one dataset contributes to the cross-dataset scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDatasetSource {
    pub dataset: DatasetId,
    /// Cached channel indices kept, in output order.
    pub channels: Vec<usize>,
    /// Dataset label for each shared activity, in [`SHARED_ACTIVITIES`] order.
    pub class_map: Vec<usize>,
    pub windowing: WindowingSpec,
    pub sensor_description: String,
}

impl CrossDatasetSource {
    pub fn default_for(dataset: DatasetId) -> Result<Self> {
        let info = dataset.info();
        let (channels, class_map, desc): (Vec<usize>, Vec<usize>, &str) = match dataset {
            DatasetId::Dsads => ((0..6).collect(), vec![8, 4, 5, 0, 1, 2], "torso accelerometer + gyroscope"),
            DatasetId::Uschad => ((0..6).collect(), vec![0, 3, 4, 7, 8, 9], "hip accelerometer + gyroscope"),
            DatasetId::Ucihar => ((0..6).collect(), vec![0, 1, 2, 3, 4, 5], "waist total acceleration + gyroscope"),
            DatasetId::Pamap2 => ((9..15).collect(), vec![3, 7, 8, 1, 2, 0], "chest accelerometer + gyroscope"),
            other => {
                return Err(HaroodError::Config(format!(
                    "{other} has no default cross-dataset mapping"
                )))
            }
        };
        Ok(CrossDatasetSource {
            dataset,
            channels,
            class_map,
            windowing: WindowingSpec {
                window_length: info.default_window,
                step: info.default_step,
                channel_count: info.channel_names.len(),
            },
            sensor_description: desc.into(),
        })
    }
}

pub const CROSS_DATASET_LENGTH: usize = 50;
pub const POSITION_CHANNELS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: ScenarioKind,
    pub datasets: Vec<DatasetId>,
    /// Subject groups, positions, dataset indices or quartiles, one group per domain.
    pub split_table: Vec<Vec<usize>>,
    pub expected_shape: [usize; 3],
    pub class_count: usize,
    pub domain_count: usize,
    pub windowing: WindowingSpec,
    pub normalization: NormalizationSpec,
    /// Cached channels kept for single-dataset scenarios; `None` keeps all.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    #[serde(default)]
    pub cross_dataset: Vec<CrossDatasetSource>,
}

fn groups(ranges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    ranges.iter().map(|&(a, b)| (a..=b).collect()).collect()
}

impl ScenarioSpec {
    /// The default specification for a scenario/dataset pair.
    pub fn default_for(scenario: ScenarioKind, dataset: DatasetId) -> Result<Self> {
        let info = dataset.info();
        let native_windowing = WindowingSpec {
            window_length: info.default_window,
            step: info.default_step,
            channel_count: info.channel_names.len(),
        };
        let unsupported = || {
            HaroodError::Config(format!("scenario {scenario} is not defined for dataset {dataset}"))
        };
        let spec = match scenario {
            ScenarioKind::CrossPerson => {
                let (split_table, channels) = match dataset {
                    DatasetId::Dsads => (vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]], None),
                    DatasetId::Uschad => (
                        vec![vec![1, 11, 2, 0], vec![6, 3, 9, 5], vec![7, 13, 8, 10], vec![4, 12]],
                        None,
                    ),
                    DatasetId::Ucihar => (
                        groups(&[(0, 5), (6, 11), (12, 17), (18, 23), (24, 29)]),
                        Some((0..6).collect::<Vec<_>>()),
                    ),
                    DatasetId::Pamap2 => (vec![vec![3, 2, 8], vec![1, 5], vec![0, 7], vec![4, 6]], None),
                    DatasetId::Emg => (groups(&[(0, 8), (9, 17), (18, 26), (27, 35)]), None),
                    DatasetId::Wesad => (groups(&[(0, 3), (4, 7), (8, 11), (12, 14)]), None),
                };
                let c = channels.as_ref().map_or(native_windowing.channel_count, Vec::len);
                ScenarioSpec {
                    scenario,
                    datasets: vec![dataset],
                    domain_count: split_table.len(),
                    split_table,
                    expected_shape: [c, 1, native_windowing.window_length],
                    class_count: info.class_count,
                    windowing: native_windowing,
                    normalization: NormalizationSpec::default(),
                    channels,
                    cross_dataset: Vec::new(),
                }
            }
            ScenarioKind::CrossPosition => {
                if dataset != DatasetId::Dsads {
                    return Err(unsupported());
                }
                ScenarioSpec {
                    scenario,
                    datasets: vec![dataset],
                    split_table: (0..5).map(|p| vec![p]).collect(),
                    expected_shape: [POSITION_CHANNELS, 1, native_windowing.window_length],
                    class_count: info.class_count,
                    domain_count: 5,
                    windowing: native_windowing,
                    normalization: NormalizationSpec::default(),
                    channels: None,
                    cross_dataset: Vec::new(),
                }
            }
            ScenarioKind::CrossDataset => Self::cross_dataset_default()?,
            ScenarioKind::CrossTime => {
                if !matches!(dataset, DatasetId::Emg | DatasetId::Pamap2 | DatasetId::Wesad) {
                    return Err(unsupported());
                }
                ScenarioSpec {
                    scenario,
                    datasets: vec![dataset],
                    split_table: (0..4).map(|q| vec![q]).collect(),
                    expected_shape: [native_windowing.channel_count, 1, native_windowing.window_length],
                    class_count: info.class_count,
                    domain_count: 4,
                    windowing: native_windowing,
                    normalization: NormalizationSpec::default(),
                    channels: None,
                    cross_dataset: Vec::new(),
                }
            }
        };
        Ok(spec)
    }

    /// DSADS, USC-HAD, UCI-HAR and PAMAP2 as four domains of shape `(6, 1, 50)`.
    pub fn cross_dataset_default() -> Result<Self> {
        let order = [DatasetId::Dsads, DatasetId::Uschad, DatasetId::Ucihar, DatasetId::Pamap2];
        let sources = order
            .iter()
            .map(|&d| CrossDatasetSource::default_for(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioSpec {
            scenario: ScenarioKind::CrossDataset,
            datasets: order.to_vec(),
            split_table: (0..4).map(|d| vec![d]).collect(),
            expected_shape: [6, 1, CROSS_DATASET_LENGTH],
            class_count: SHARED_ACTIVITIES.len(),
            domain_count: 4,
            windowing: WindowingSpec {
                window_length: CROSS_DATASET_LENGTH,
                step: CROSS_DATASET_LENGTH,
                channel_count: 6,
            },
            normalization: NormalizationSpec::default(),
            channels: None,
            cross_dataset: sources,
        })
    }

    /// Changes the window length (step keeps its ratio to the length).
    pub fn with_window_length(mut self, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(HaroodError::Config("window length must be positive".into()));
        }
        if self.scenario == ScenarioKind::CrossDataset {
            self.windowing.window_length = length;
            self.windowing.step = length;
        } else {
            let ratio = self.windowing.step as f64 / self.windowing.window_length as f64;
            self.windowing.window_length = length;
            self.windowing.step = ((length as f64 * ratio).round() as usize).clamp(1, length);
        }
        self.expected_shape[2] = length;
        Ok(self)
    }

    pub fn with_normalization(mut self, normalization: NormalizationSpec) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_table.len() != self.domain_count {
            return Err(HaroodError::Split(format!(
                "{} split groups for {} domains",
                self.split_table.len(),
                self.domain_count
            )));
        }
        let mut seen = BTreeSet::new();
        for g in &self.split_table {
            if g.is_empty() {
                return Err(HaroodError::Split("empty split group".into()));
            }
            for &m in g {
                if !seen.insert(m) {
                    return Err(HaroodError::Split(format!("{m} appears in more than one split group")));
                }
            }
        }
        self.windowing.validate()
    }
}

/// A multi-domain dataset produced by one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioBundle {
    pub domains: Vec<DomainDataset>,
    pub class_count: usize,
    pub spec: ScenarioSpec,
    pub metadata: BTreeMap<String, String>,
}

impl ScenarioBundle {
    pub fn new(domains: Vec<DomainDataset>, spec: ScenarioSpec, metadata: BTreeMap<String, String>) -> Result<Self> {
        if domains.is_empty() {
            return Err(HaroodError::Split("bundle has no domains".into()));
        }
        let shape = domains[0].shape();
        for (i, d) in domains.iter().enumerate() {
            if d.domain_id != i {
                return Err(HaroodError::Split(format!("domain {i} carries id {}", d.domain_id)));
            }
            if d.shape() != shape {
                return Err(HaroodError::Shape(format!(
                    "domain {i} shape {:?} differs from {shape:?}",
                    d.shape()
                )));
            }
            if d.class_count != spec.class_count {
                return Err(HaroodError::Shape(format!("domain {i} has a different class count")));
            }
        }
        Ok(ScenarioBundle {
            class_count: spec.class_count,
            domains,
            spec,
            metadata,
        })
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.domains[0].shape()
    }

    pub fn total_windows(&self) -> usize {
        self.domains.iter().map(DomainDataset::len).sum()
    }

    /// Short identifier such as `cross_person-dsads`.
    pub fn id(&self) -> String {
        let names: Vec<&str> = self.spec.datasets.iter().map(|d| d.name()).collect();
        format!("{}-{}", self.spec.scenario, names.join("+"))
    }
}

/// One leave-one-domain-out task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LodoTask {
    pub source_domains: Vec<usize>,
    pub target_domain: usize,
}

impl LodoTask {
    pub fn id(&self) -> String {
        format!("target{}", self.target_domain)
    }
}

pub fn leave_one_out_tasks(bundle: &ScenarioBundle) -> Result<Vec<LodoTask>> {
    lodo_tasks(bundle.domain_count())
}

pub fn lodo_tasks(domain_count: usize) -> Result<Vec<LodoTask>> {
    if domain_count < 2 {
        return Err(HaroodError::Protocol(format!(
            "leave-one-domain-out needs at least two domains, got {domain_count}"
        )));
    }
    Ok((0..domain_count)
        .map(|t| LodoTask {
            source_domains: (0..domain_count).filter(|&d| d != t).collect(),
            target_domain: t,
        })
        .collect())
}

/// Where cached recordings come from.
pub trait RecordingSource {
    fn recordings(&self, dataset: DatasetId) -> Result<Vec<RawRecording>>;
    fn location(&self, dataset: DatasetId) -> PathBuf;
}

/// Recordings read from an ingestion cache directory.
pub struct CacheDir(pub PathBuf);

impl RecordingSource for CacheDir {
    fn recordings(&self, dataset: DatasetId) -> Result<Vec<RawRecording>> {
        read_cache(&self.0, dataset)
    }

    fn location(&self, dataset: DatasetId) -> PathBuf {
        self.0.join(dataset.name())
    }
}

/// Recordings held in memory.
#[derive(Default)]
pub struct InMemory(pub HashMap<DatasetId, Vec<RawRecording>>);

impl RecordingSource for InMemory {
    fn recordings(&self, dataset: DatasetId) -> Result<Vec<RawRecording>> {
        self.0
            .get(&dataset)
            .cloned()
            .ok_or_else(|| HaroodError::ingestion(self.location(dataset), "dataset not loaded"))
    }

    fn location(&self, dataset: DatasetId) -> PathBuf {
        Path::new("<memory>").join(dataset.name())
    }
}

/// Windows one recording, optionally keeping a subset of channels; short recordings yield nothing.
fn window_recording(
    rec: &RawRecording,
    windowing: &WindowingSpec,
    channels: Option<&[usize]>,
    label: usize,
    domain_id: usize,
) -> Result<Vec<SensorWindow>> {
    if rec.channels() != windowing.channel_count {
        return Err(HaroodError::Shape(format!(
            "recording has {} channels, scenario expects {}",
            rec.channels(),
            windowing.channel_count
        )));
    }
    if rec.time_steps() < windowing.window_length {
        log::debug!(
            "skipping recording of {} steps (< {})",
            rec.time_steps(),
            windowing.window_length
        );
        return Ok(Vec::new());
    }
    let windows = sliding_window(rec.stream(), windowing, label, domain_id)?;
    match channels {
        None => Ok(windows),
        Some(ch) => windows.iter().map(|w| w.select_channels(ch)).collect(),
    }
}

fn finish(
    mut per_domain: Vec<Vec<SensorWindow>>,
    spec: &ScenarioSpec,
    metadata: BTreeMap<String, String>,
) -> Result<ScenarioBundle> {
    let counts: Vec<usize> = per_domain.iter().map(Vec::len).collect();
    if let Some(d) = counts.iter().position(|&n| n == 0) {
        return Err(HaroodError::Split(format!("domain {d} received no windows")));
    }
    let all: Vec<SensorWindow> = per_domain.drain(..).flatten().collect();
    let normalized = normalize(&all, spec.normalization)?;
    let mut it = normalized.windows.into_iter();
    let domains = counts
        .iter()
        .enumerate()
        .map(|(d, &n)| DomainDataset::new(it.by_ref().take(n).collect(), d, spec.class_count))
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = metadata;
    if !normalized.warnings.is_empty() {
        metadata.insert("normalization_warnings".into(), normalized.warnings.join("; "));
    }
    ScenarioBundle::new(domains, spec.clone(), metadata)
}

fn single_dataset(spec: &ScenarioSpec) -> Result<DatasetId> {
    match spec.datasets.as_slice() {
        [d] => Ok(*d),
        _ => Err(HaroodError::Config(format!(
            "{} expects exactly one dataset",
            spec.scenario
        ))),
    }
}

fn check_labels(windows: &[SensorWindow], class_count: usize) -> Result<()> {
    if let Some(w) = windows.iter().find(|w| w.label >= class_count) {
        return Err(HaroodError::Shape(format!(
            "label {} outside 0..{class_count}",
            w.label
        )));
    }
    Ok(())
}

/// Subject groups become domains.
pub fn build_cross_person(source: &dyn RecordingSource, spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    spec.validate()?;
    let dataset = single_dataset(spec)?;
    let recs = source.recordings(dataset)?;
    let mut per_domain = Vec::with_capacity(spec.domain_count);
    for (d, group) in spec.split_table.iter().enumerate() {
        let mut windows = Vec::new();
        for &subject in group {
            let mine: Vec<&RawRecording> = recs.iter().filter(|r| r.subject_id == subject).collect();
            if mine.is_empty() {
                return Err(HaroodError::ingestion(
                    source.location(dataset),
                    format!("subject {subject} is missing"),
                ));
            }
            for r in mine {
                windows.extend(window_recording(r, &spec.windowing, spec.channels.as_deref(), r.activity_label, d)?);
            }
        }
        check_labels(&windows, spec.class_count)?;
        per_domain.push(windows);
    }
    let mut meta = BTreeMap::new();
    meta.insert("dataset".into(), dataset.name().into());
    finish(per_domain, spec, meta)
}

/// Splits 45-channel DSADS windows into five 9-channel windows, one domain per body position.
pub fn split_positions(windows: &[SensorWindow]) -> Result<Vec<Vec<SensorWindow>>> {
    let mut out: Vec<Vec<SensorWindow>> = (0..5).map(|_| Vec::with_capacity(windows.len())).collect();
    for w in windows {
        if w.channels() != 5 * POSITION_CHANNELS {
            return Err(HaroodError::Shape(format!(
                "cross-position needs 45-channel windows, got {}",
                w.channels()
            )));
        }
        for (p, dom) in out.iter_mut().enumerate() {
            let mut s = w.channel_slice(p * POSITION_CHANNELS, (p + 1) * POSITION_CHANNELS)?;
            s.domain_id = p;
            dom.push(s);
        }
    }
    Ok(out)
}

pub fn build_cross_position(source: &dyn RecordingSource, spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    spec.validate()?;
    let dataset = single_dataset(spec)?;
    let recs = source.recordings(dataset)?;
    let mut windows = Vec::new();
    for r in &recs {
        windows.extend(window_recording(r, &spec.windowing, None, r.activity_label, 0)?);
    }
    check_labels(&windows, spec.class_count)?;
    let positions = split_positions(&windows)?;
    let per_domain = spec
        .split_table
        .iter()
        .enumerate()
        .map(|(d, g)| {
            g.iter()
                .flat_map(|&p| positions[p].iter().cloned())
                .map(|mut w| {
                    w.domain_id = d;
                    w
                })
                .collect()
        })
        .collect();
    let names = dataset.info().sensor_positions.join(",");
    let mut meta = BTreeMap::new();
    meta.insert("dataset".into(), dataset.name().into());
    meta.insert("positions".into(), names);
    finish(per_domain, spec, meta)
}

pub fn build_cross_dataset(source: &dyn RecordingSource, spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    spec.validate()?;
    let target = spec.expected_shape[2];
    let mut meta = BTreeMap::new();
    let mut per_dataset = Vec::with_capacity(spec.cross_dataset.len());
    for src in &spec.cross_dataset {
        if src.class_map.len() != spec.class_count {
            return Err(HaroodError::Config(format!(
                "{} maps {} classes, scenario has {}",
                src.dataset,
                src.class_map.len(),
                spec.class_count
            )));
        }
        let recs = source.recordings(src.dataset)?;
        let mut windows = Vec::new();
        for r in &recs {
            let Some(label) = src.class_map.iter().position(|&l| l == r.activity_label) else {
                continue;
            };
            for w in window_recording(r, &src.windowing, Some(&src.channels), label, 0)? {
                windows.push(if w.length() == target { w } else { downsample(&w, target)? });
            }
        }
        let mut present = vec![false; spec.class_count];
        for w in &windows {
            present[w.label] = true;
        }
        if let Some(k) = present.iter().position(|p| !p) {
            let name = SHARED_ACTIVITIES.get(k).copied().unwrap_or("?");
            return Err(HaroodError::Split(format!(
                "{} has no windows of shared class {k} ({name})",
                src.dataset
            )));
        }
        meta.insert(format!("sensors.{}", src.dataset), src.sensor_description.clone());
        per_dataset.push(windows);
    }
    let per_domain = spec
        .split_table
        .iter()
        .enumerate()
        .map(|(d, g)| {
            g.iter()
                .flat_map(|&i| per_dataset[i].iter().cloned())
                .map(|mut w| {
                    w.domain_id = d;
                    w
                })
                .collect()
        })
        .collect();
    meta.insert("classes".into(), SHARED_ACTIVITIES.join(","));
    finish(per_domain, spec, meta)
}

/// Sizes of four chronological parts of `n` windows; remainders go to the earliest parts.
pub fn quartile_sizes(n: usize) -> [usize; 4] {
    let base = n / 4;
    let rem = n % 4;
    let mut out = [base; 4];
    for q in out.iter_mut().take(rem) {
        *q += 1;
    }
    out
}

pub fn build_cross_time(source: &dyn RecordingSource, spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    spec.validate()?;
    let dataset = single_dataset(spec)?;
    let recs = source.recordings(dataset)?;
    let mut quarters: Vec<Vec<SensorWindow>> = vec![Vec::new(); 4];
    for r in &recs {
        let mut windows = window_recording(r, &spec.windowing, spec.channels.as_deref(), r.activity_label, 0)?;
        if windows.is_empty() {
            continue;
        }
        if windows.len() < 4 {
            log::info!(
                "recording of subject {} has {} windows; only the earliest quartiles receive data",
                r.subject_id,
                windows.len()
            );
        }
        windows.sort_by_key(|w| w.timestamp_index);
        let mut it = windows.into_iter();
        for (q, n) in quartile_sizes(it.len()).into_iter().enumerate() {
            quarters[q].extend(it.by_ref().take(n));
        }
    }
    for q in &quarters {
        check_labels(q, spec.class_count)?;
    }
    let per_domain = spec
        .split_table
        .iter()
        .enumerate()
        .map(|(d, g)| {
            g.iter()
                .flat_map(|&q| quarters[q].iter().cloned())
                .map(|mut w| {
                    w.domain_id = d;
                    w
                })
                .collect()
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("dataset".into(), dataset.name().into());
    finish(per_domain, spec, meta)
}

pub fn build_scenario(source: &dyn RecordingSource, spec: &ScenarioSpec) -> Result<ScenarioBundle> {
    match spec.scenario {
        ScenarioKind::CrossPerson => build_cross_person(source, spec),
        ScenarioKind::CrossPosition => build_cross_position(source, spec),
        ScenarioKind::CrossDataset => build_cross_dataset(source, spec),
        ScenarioKind::CrossTime => build_cross_time(source, spec),
    }
}

/// Every scenario/dataset pair with a default specification.
pub fn default_scenarios() -> Vec<(ScenarioKind, DatasetId)> {
    let mut out: Vec<(ScenarioKind, DatasetId)> = DatasetId::ALL
        .iter()
        .map(|&d| (ScenarioKind::CrossPerson, d))
        .collect();
    out.push((ScenarioKind::CrossPosition, DatasetId::Dsads));
    out.push((ScenarioKind::CrossDataset, DatasetId::Dsads));
    for d in [DatasetId::Pamap2, DatasetId::Emg, DatasetId::Wesad] {
        out.push((ScenarioKind::CrossTime, d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_give_remainder_to_earliest() {
        assert_eq!(quartile_sizes(8), [2, 2, 2, 2]);
        assert_eq!(quartile_sizes(10), [3, 3, 2, 2]);
        assert_eq!(quartile_sizes(3), [1, 1, 1, 0]);
    }

    #[test]
    fn lodo_holds_out_each_domain() {
        let tasks = lodo_tasks(5).unwrap();
        assert_eq!(tasks.len(), 5);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.target_domain, i);
            assert_eq!(t.source_domains.len(), 4);
            assert!(!t.source_domains.contains(&i));
        }
        assert!(matches!(lodo_tasks(1), Err(HaroodError::Protocol(_))));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut spec = ScenarioSpec::default_for(ScenarioKind::CrossPerson, DatasetId::Dsads).unwrap();
        spec.split_table[1][0] = 0;
        assert!(matches!(spec.validate(), Err(HaroodError::Split(_))));
    }

    #[test]
    fn scenario_aliases_parse() {
        assert_eq!(ScenarioKind::parse("cross_people").unwrap(), ScenarioKind::CrossPerson);
        let k: ScenarioKind = serde_yaml::from_str("cross_people").unwrap();
        assert_eq!(k, ScenarioKind::CrossPerson);
    }

    #[test]
    fn window_length_override_updates_shape() {
        let spec = ScenarioSpec::default_for(ScenarioKind::CrossTime, DatasetId::Emg)
            .unwrap()
            .with_window_length(500)
            .unwrap();
        assert_eq!(spec.expected_shape, [8, 1, 500]);
        assert_eq!(spec.windowing.step, 250);
    }
}
