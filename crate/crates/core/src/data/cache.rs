//! Per-subject intermediate files: `<cache>/<dataset>/subject_<id>.bin` plus a JSON sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::{load_dataset, DatasetId};
use super::RawRecording;
use crate::error::{HaroodError, Result};

const MAGIC: &[u8; 4] = b"HARC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSidecar {
    pub dataset: String,
    pub subject_id: usize,
    /// Activity label of each recording, in file order.
    pub activity_labels: Vec<usize>,
    pub sampling_rate_hz: f64,
    pub channel_names: Vec<String>,
    #[serde(default)]
    pub recording_metadata: Vec<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestSummary {
    pub dataset: String,
    pub subjects: usize,
    pub recordings: usize,
    pub files: Vec<PathBuf>,
}

pub fn subject_path(cache_dir: &Path, dataset: DatasetId, subject: usize) -> PathBuf {
    cache_dir.join(dataset.name()).join(format!("subject_{subject:03}.bin"))
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode(recordings: &[&RawRecording]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((recordings.len() as u32).to_le_bytes());
    for r in recordings {
        out.extend((r.activity_label as u32).to_le_bytes());
        out.extend((r.time_steps() as u32).to_le_bytes());
        out.extend((r.channels() as u32).to_le_bytes());
        for &v in r.stream() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Option<&'a [u8]> {
    let s = bytes.get(*pos..pos.checked_add(n)?)?;
    *pos += n;
    Some(s)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let bad = |msg: &str| HaroodError::ingestion(path, msg.to_string());
    let mut pos = 0usize;
    let word = |pos: &mut usize| -> Result<usize> {
        let b = take(bytes, pos, 4).ok_or_else(|| bad("truncated cache file"))?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad("not a cache file"));
    }
    pos += 4;
    if word(&mut pos)? != VERSION as usize {
        return Err(bad("unsupported cache version"));
    }
    let count = word(&mut pos)?;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = word(&mut pos)?;
        let rows = word(&mut pos)?;
        let cols = word(&mut pos)?;
        let raw = take(bytes, &mut pos, 4 * rows * cols).ok_or_else(|| bad("truncated cache file"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((label, cols, data));
    }
    Ok(out)
}

/// Writes one binary file and sidecar per subject.
pub fn write_cache(cache_dir: &Path, dataset: DatasetId, recordings: &[RawRecording]) -> Result<IngestSummary> {
    let info = dataset.info();
    let mut by_subject: BTreeMap<usize, Vec<&RawRecording>> = BTreeMap::new();
    for r in recordings {
        by_subject.entry(r.subject_id).or_default().push(r);
    }
    let mut files = Vec::new();
    for (&subject, recs) in &by_subject {
        let path = subject_path(cache_dir, dataset, subject);
        write_atomic(&path, &encode(recs))?;
        let sidecar = SubjectSidecar {
            dataset: dataset.name().into(),
            subject_id: subject,
            activity_labels: recs.iter().map(|r| r.activity_label).collect(),
            sampling_rate_hz: info.sampling_rate_hz,
            channel_names: info.channel_names.clone(),
            recording_metadata: recs.iter().map(|r| r.metadata.clone()).collect(),
        };
        write_atomic(&path.with_extension("json"), &serde_json::to_vec_pretty(&sidecar)?)?;
        files.push(path);
    }
    Ok(IngestSummary {
        dataset: dataset.name().into(),
        subjects: by_subject.len(),
        recordings: recordings.len(),
        files,
    })
}

/// Reads one subject's recordings back, in the order they were written.
pub fn read_subject(cache_dir: &Path, dataset: DatasetId, subject: usize) -> Result<Vec<RawRecording>> {
    let path = subject_path(cache_dir, dataset, subject);
    let bytes = fs::read(&path).map_err(|e| HaroodError::ingestion(&path, e.to_string()))?;
    let side_path = path.with_extension("json");
    let side_bytes = fs::read(&side_path).map_err(|e| HaroodError::ingestion(&side_path, e.to_string()))?;
    let sidecar: SubjectSidecar =
        serde_json::from_slice(&side_bytes).map_err(|e| HaroodError::ingestion(&side_path, e.to_string()))?;
    let decoded = decode(&path, &bytes)?;
    if decoded.len() != sidecar.activity_labels.len() {
        return Err(HaroodError::ingestion(&side_path, "recording count differs from binary file"));
    }
    decoded
        .into_iter()
        .enumerate()
        .map(|(i, (label, cols, data))| {
            let meta = sidecar.recording_metadata.get(i).cloned().unwrap_or_default();
            RawRecording::new(data, cols, subject, label, meta).map_err(|e| HaroodError::ingestion(&path, e.to_string()))
        })
        .collect()
}

/// Subject ids present in the cache for `dataset`, ascending.
pub fn cached_subjects(cache_dir: &Path, dataset: DatasetId) -> Result<Vec<usize>> {
    let dir = cache_dir.join(dataset.name());
    let entries = fs::read_dir(&dir).map_err(|e| HaroodError::ingestion(&dir, e.to_string()))?;
    let mut ids: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("subject_")?.strip_suffix(".bin")?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Every cached recording of `dataset`, ordered by subject.
pub fn read_cache(cache_dir: &Path, dataset: DatasetId) -> Result<Vec<RawRecording>> {
    let mut out = Vec::new();
    for s in cached_subjects(cache_dir, dataset)? {
        out.extend(read_subject(cache_dir, dataset, s)?);
    }
    Ok(out)
}

/// Parses a dataset from its raw layout and writes the cache.
pub fn ingest(name: &str, root: &Path, cache_dir: &Path) -> Result<IngestSummary> {
    let id = DatasetId::parse(name)?;
    let recordings = load_dataset(name, root)?;
    write_cache(cache_dir, id, &recordings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("segment".to_string(), "3".to_string());
        let recs = vec![
            RawRecording::new(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0], 2, 1, 4, meta.clone()).unwrap(),
            RawRecording::new(vec![9.0, 8.0], 2, 1, 0, BTreeMap::new()).unwrap(),
            RawRecording::new(vec![7.0, 6.0], 2, 5, 2, BTreeMap::new()).unwrap(),
        ];
        let summary = write_cache(dir.path(), DatasetId::Emg, &recs).unwrap();
        assert_eq!(summary.subjects, 2);
        assert_eq!(cached_subjects(dir.path(), DatasetId::Emg).unwrap(), vec![1, 5]);
        let back = read_cache(dir.path(), DatasetId::Emg).unwrap();
        assert_eq!(back, recs);
        let side: SubjectSidecar = serde_json::from_slice(
            &fs::read(subject_path(dir.path(), DatasetId::Emg, 1).with_extension("json")).unwrap(),
        )
        .unwrap();
        assert_eq!(side.activity_labels, vec![4, 0]);
        assert_eq!(side.channel_names.len(), 8);
    }

    #[test]
    fn truncated_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![RawRecording::new(vec![1.0; 4], 2, 0, 0, BTreeMap::new()).unwrap()];
        write_cache(dir.path(), DatasetId::Dsads, &recs).unwrap();
        let path = subject_path(dir.path(), DatasetId::Dsads, 0);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_subject(dir.path(), DatasetId::Dsads, 0) {
            Err(HaroodError::Ingestion { file, .. }) => assert_eq!(file, path),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
