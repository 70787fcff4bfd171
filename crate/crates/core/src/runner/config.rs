use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::algorithms::{algorithm_info, AlgorithmConfig};
use crate::data::synthetic::SyntheticShiftSpec;
use crate::error::{HaroodError, Result};
use crate::eval::protocol::{DEFAULT_BATCH_SIZES, DEFAULT_LRS};
use crate::eval::{Grid, HyperParams, SelectionKind};
use crate::nn::backbone::{BackboneConfig, Capacity, Family};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lr: DEFAULT_LRS.to_vec(),
            batch_size: DEFAULT_BATCH_SIZES.to_vec(),
        }
    }
}

/// One experiment. Keys mirror the familiar YAML layout; everything has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: String,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out domains; all when absent.
    pub test_envs: Option<Vec<usize>>,
    pub output: PathBuf,
    pub max_epoch: usize,
    /// Scenario id, e.g. `cross_people`.
    pub task: String,
    pub dataset: String,
    pub backbone: Family,
    pub capacity: Capacity,
    pub seed: u64,
    pub protocol: SelectionKind,
    /// Replaces the single `lr`/`batch_size` combo when present.
    pub grid: Option<GridConfig>,
    pub trials: usize,
    pub window_length: Option<usize>,
    pub validation_fraction: f64,
    /// Raw dataset root, ingested into `cache_dir` when the cache is missing.
    pub data_root: Option<PathBuf>,
    pub cache_dir: PathBuf,
    /// A saved scenario bundle; takes precedence over dataset loading.
    pub bundle: Option<PathBuf>,
    /// Train on a synthetic shift suite instead of a dataset.
    pub synthetic: Option<SyntheticShiftSpec>,
    /// Use generated recordings with this many windows each instead of a cache.
    pub mock_windows: Option<usize>,
    /// Field overrides for the algorithm configuration.
    pub algorithm_config: BTreeMap<String, Value>,
    /// Field overrides for the backbone configuration.
    pub backbone_config: BTreeMap<String, Value>,
    pub timing_repetitions: usize,
    pub dump_features: bool,
    pub deterministic: bool,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: "ERM".into(),
            batch_size: 32,
            lr: 0.01,
            test_envs: None,
            output: PathBuf::from("output"),
            max_epoch: crate::eval::protocol::DEFAULT_MAX_EPOCH,
            task: "cross_people".into(),
            dataset: "dsads".into(),
            backbone: Family::Cnn,
            capacity: Capacity::Small,
            seed: 0,
            protocol: SelectionKind::TrainingDomainValidation,
            grid: None,
            trials: crate::eval::protocol::DEFAULT_TRIALS,
            window_length: None,
            validation_fraction: 0.2,
            data_root: None,
            cache_dir: PathBuf::from("cache"),
            bundle: None,
            synthetic: None,
            mock_windows: None,
            algorithm_config: BTreeMap::new(),
            backbone_config: BTreeMap::new(),
            timing_repetitions: 0,
            dump_features: false,
            deterministic: false,
            workers: None,
        }
    }
}

/// Where a configuration comes from.
pub enum ConfigSource<'a> {
    File(&'a Path),
    Mapping(Value),
    Defaults,
}

fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

fn read_mapping(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HaroodError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: Value = if is_json {
        serde_json::from_str(&text)?
    } else {
        serde_yaml::from_str(&text)?
    };
    match value {
        Value::Object(m) => Ok(m),
        Value::Null => Ok(Map::new()),
        _ => Err(HaroodError::Config(format!("{} is not a key/value mapping", path.display()))),
    }
}

/// Override values are read as YAML scalars or flow collections, so
/// `lr=2e-3`, `test_envs=[0,1]` and `algorithm=CORAL` all work.
fn parse_override_value(raw: &str) -> Result<Value> {
    if raw.trim().is_empty() {
        return Ok(Value::String(String::new()));
    }
    Ok(serde_yaml::from_str(raw)?)
}

fn apply_override(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    match key.split_once('.') {
        None => {
            map.insert(key.to_string(), value);
        }
        Some((head, rest)) => {
            let slot = map.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            match slot {
                Value::Object(inner) => apply_override(inner, rest, value)?,
                Value::Null => {
                    let mut inner = Map::new();
                    apply_override(&mut inner, rest, value)?;
                    *slot = Value::Object(inner);
                }
                _ => return Err(HaroodError::Config(format!("`{head}` is not a mapping"))),
            }
        }
    }
    Ok(())
}

/// Precedence: overrides, then the source mapping, then defaults. Unknown
/// top-level keys are rejected together.
pub fn parse_config(source: ConfigSource<'_>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut map = match source {
        ConfigSource::File(p) => read_mapping(p)?,
        ConfigSource::Mapping(Value::Object(m)) => m,
        ConfigSource::Mapping(Value::Null) | ConfigSource::Defaults => Map::new(),
        ConfigSource::Mapping(_) => return Err(HaroodError::Config("configuration must be a mapping".into())),
    };
    for (k, v) in overrides {
        apply_override(&mut map, k.trim(), parse_override_value(v)?)?;
    }
    let known = known_keys();
    let unknown: Vec<&str> = map.keys().filter(|k| !known.contains(k)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(HaroodError::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| HaroodError::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `key=value` override strings.
pub fn parse_overrides<S: AsRef<str>>(items: &[S]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.as_ref()
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| HaroodError::Config(format!("override `{}` is not key=value", s.as_ref())))
        })
        .collect()
}

fn merge_fields<T: Serialize + for<'de> Deserialize<'de>>(
    base: T,
    fields: &BTreeMap<String, Value>,
    what: &str,
) -> Result<T> {
    if fields.is_empty() {
        return Ok(base);
    }
    let mut v = serde_json::to_value(base)?;
    let m = v.as_object_mut().expect("struct serializes to a mapping");
    for (k, val) in fields {
        m.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| HaroodError::Config(format!("invalid {what} override: {e}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        parse_config(ConfigSource::File(path), &[])
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        algorithm_info(&self.algorithm)?;
        HyperParams {
            lr: self.lr,
            batch_size: self.batch_size,
        }
        .validate()?;
        if self.max_epoch == 0 {
            return Err(HaroodError::Config("max_epoch must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(HaroodError::Config("trials must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(HaroodError::Config(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.workers == Some(0) {
            return Err(HaroodError::Config("workers must be at least 1".into()));
        }
        self.hyper_grid()?;
        self.algorithm_settings()?.validate()
    }

    pub fn hyper_grid(&self) -> Result<Grid> {
        match &self.grid {
            Some(g) => Grid::product(&g.lr, &g.batch_size),
            None => Ok(Grid::single(HyperParams {
                lr: self.lr,
                batch_size: self.batch_size,
            })),
        }
    }

    /// Canonical algorithm name plus overrides.
    pub fn algorithm_settings(&self) -> Result<AlgorithmConfig> {
        let name = algorithm_info(&self.algorithm)?.name;
        let mut cfg = merge_fields(AlgorithmConfig::named(name), &self.algorithm_config, "algorithm_config")?;
        cfg.name = name.to_string();
        Ok(cfg)
    }

    pub fn backbone_settings(&self, input_shape: [usize; 3]) -> Result<BackboneConfig> {
        let base = match self.backbone {
            Family::Cnn => BackboneConfig::cnn(input_shape),
            Family::Transformer => BackboneConfig::transformer(input_shape),
        }
        .with_capacity(self.capacity);
        let mut cfg = merge_fields(base, &self.backbone_config, "backbone_config")?;
        cfg.input_shape = input_shape;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration file flag or `HAROOD_DETERMINISTIC=1`.
    pub fn deterministic_mode(&self) -> bool {
        self.deterministic || env_flag("HAROOD_DETERMINISTIC")
    }

    /// The configuration value, else `HAROOD_WORKERS`, else the machine's parallelism.
    pub fn worker_count(&self) -> usize {
        self.workers
            .or_else(|| std::env::var("HAROOD_WORKERS").ok().and_then(|v| v.trim().parse().ok()))
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| matches!(v.trim(), "1" | "true" | "yes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn mapping_with_defaults() {
        let cfg = parse_config(ConfigSource::Mapping(json!({"algorithm": "CORAL", "batch_size": 32})), &[]).unwrap();
        assert_eq!(cfg.algorithm, "CORAL");
        assert_eq!(cfg.max_epoch, 150);
        assert_eq!(cfg.trials, 3);
    }

    #[test]
    fn overrides_win() {
        let o = parse_overrides(&["lr=2e-3", "max_epoch=200", "algorithm_config.penalty_weight=0.5"]).unwrap();
        let cfg = parse_config(ConfigSource::Mapping(json!({"lr": 0.01})), &o).unwrap();
        assert_eq!(cfg.lr, 2e-3);
        assert_eq!(cfg.max_epoch, 200);
        assert_eq!(cfg.algorithm_settings().unwrap().penalty_weight, 0.5);
    }

    #[test]
    fn unknown_keys_listed() {
        let err = parse_config(ConfigSource::Mapping(json!({"lr": 0.1, "bogus": 1, "zzz": 2})), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("zzz"), "{msg}");
        let err = parse_config(ConfigSource::Mapping(json!({"algorithm_config": {"nope": 1}})), &[]).unwrap_err();
        assert!(matches!(err, HaroodError::Config(_)));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse_config(ConfigSource::Mapping(json!({"lr": 0.0})), &[]).is_err());
        assert!(parse_config(ConfigSource::Mapping(json!({"batch_size": 0})), &[]).is_err());
        assert!(matches!(
            parse_config(ConfigSource::Mapping(json!({"algorithm": "Nope"})), &[]),
            Err(HaroodError::Registry(_))
        ));
    }
}
