use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::data::cache::write_atomic;
use crate::error::{HaroodError, Result};
use crate::eval::RunRecord;

pub const INDEX_FILE: &str = "index.json";

/// Identifies one run within a store.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub scenario: String,
    pub dataset: String,
    pub algorithm: String,
    pub backbone: String,
    pub combo: String,
    pub target: usize,
    pub seed: u64,
}

impl RunKey {
    pub fn of(r: &RunRecord) -> Self {
        RunKey {
            scenario: r.scenario.clone(),
            dataset: r.dataset.clone(),
            algorithm: r.algorithm.clone(),
            backbone: r.backbone.clone(),
            combo: r.combo.clone(),
            target: r.target_domain,
            seed: r.seed,
        }
    }

    fn dir(&self, root: &Path) -> PathBuf {
        join_segments(root, &[&self.scenario, &self.dataset, &self.algorithm, &self.backbone, &self.combo])
    }

    fn stem(&self) -> String {
        format!("target{}_seed{}", self.target, self.seed)
    }
}

fn join_segments(root: &Path, parts: &[&str]) -> PathBuf {
    parts.iter().fold(root.to_path_buf(), |p, s| p.join(segment(s)))
}

fn segment(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if cleaned.is_empty() || cleaned.chars().all(|c| c == '.') {
        "_".into()
    } else {
        cleaned
    }
}

/// `stem.jsonl` is version 1, `stem.vN.jsonl` version N.
fn parse_name(name: &str) -> Option<(&str, u32)> {
    let base = name.strip_suffix(".jsonl")?;
    if let Some((stem, v)) = base.rsplit_once(".v") {
        if let Ok(n) = v.parse::<u32>() {
            return Some((stem, n));
        }
    }
    Some((base, 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub version: u32,
    pub task: String,
    pub algorithm: String,
    pub combo: String,
    pub seed: u64,
    pub target_acc: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub runs: Vec<IndexEntry>,
}

/// Append-only run files under one output root; one file per run.
#[derive(Clone, Debug)]
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ResultsStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The directory for a path prefix such as `[scenario, dataset]`.
    pub fn group_dir(&self, parts: &[&str]) -> PathBuf {
        join_segments(&self.root, parts)
    }

    pub fn path_for(&self, key: &RunKey, version: u32) -> PathBuf {
        let name = if version <= 1 {
            format!("{}.jsonl", key.stem())
        } else {
            format!("{}.v{version}.jsonl", key.stem())
        };
        key.dir(&self.root).join(name)
    }

    /// Highest existing version of a run.
    pub fn latest(&self, key: &RunKey) -> Option<(PathBuf, u32)> {
        let dir = key.dir(&self.root);
        let stem = key.stem();
        fs::read_dir(&dir)
            .ok()?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                let (s, v) = parse_name(&name)?;
                (s == stem).then_some(v)
            })
            .max()
            .map(|v| (self.path_for(key, v), v))
    }

    /// Writes a record to a fresh file; an existing run gets the next version.
    pub fn persist(&self, record: &RunRecord) -> Result<PathBuf> {
        let key = RunKey::of(record);
        let version = self.latest(&key).map_or(1, |(_, v)| v + 1);
        let path = self.path_for(&key, version);
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        write_atomic(&path, line.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        let text = fs::read_to_string(path)?;
        let line = text
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| HaroodError::Report(format!("{} is empty", path.display())))?;
        serde_json::from_str(line).map_err(|e| HaroodError::Report(format!("{}: {e}", path.display())))
    }

    /// Every run file, sorted by path.
    pub fn run_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = WalkDir::new(&self.root)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .filter(|e| {
                let name = e.file_name().to_string_lossy();
                !name.starts_with('.') && parse_name(&name).is_some()
            })
            .map(|e| e.into_path())
            .collect();
        files.sort();
        files
    }

    /// The latest version of every run, in path order.
    pub fn load_latest(&self) -> Result<Vec<RunRecord>> {
        let mut latest: BTreeMap<(PathBuf, String), (u32, PathBuf)> = BTreeMap::new();
        for f in self.run_files() {
            let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let (stem, v) = parse_name(&name).expect("filtered by run_files");
            let key = (f.parent().unwrap_or(&self.root).to_path_buf(), stem.to_string());
            if latest.get(&key).is_none_or(|(old, _)| v > *old) {
                latest.insert(key, (v, f));
            }
        }
        latest.into_values().map(|(_, p)| Self::load(&p)).collect()
    }

    fn relative(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Rebuilds the index from the run files and writes it atomically.
    pub fn rebuild_index(&self) -> Result<StoreIndex> {
        let runs = self
            .run_files()
            .iter()
            .map(|f| {
                let r = Self::load(f)?;
                let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let version = parse_name(&name).map_or(1, |(_, v)| v);
                Ok(IndexEntry {
                    path: self.relative(f),
                    version,
                    task: r.task,
                    algorithm: r.algorithm,
                    combo: r.combo,
                    seed: r.seed,
                    target_acc: r.final_metrics.target_acc,
                    diverged: r.diverged,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = StoreIndex { runs };
        write_atomic(&self.root.join(INDEX_FILE), serde_json::to_string_pretty(&index)?.as_bytes())?;
        Ok(index)
    }
}

/// Persists each record; returns the written paths in input order.
pub fn persist_results(store: &ResultsStore, records: &[RunRecord]) -> Result<Vec<PathBuf>> {
    records.iter().map(|r| store.persist(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_versions() {
        assert_eq!(parse_name("target0_seed1.jsonl"), Some(("target0_seed1", 1)));
        assert_eq!(parse_name("target0_seed1.v3.jsonl"), Some(("target0_seed1", 3)));
        assert_eq!(parse_name("index.json"), None);
        assert_eq!(segment("lr0.01_bs32"), "lr0.01_bs32");
        assert_eq!(segment("a/b"), "a_b");
        assert_eq!(segment(".."), "_");
    }
}
