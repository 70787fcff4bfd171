//! Bundle directories: `manifest.json` plus one `domain_<i>.bin` per domain.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScenarioBundle, ScenarioKind, ScenarioSpec};
use crate::data::cache::write_atomic;
use crate::data::normalize::NormalizationSpec;
use crate::data::window::WindowingSpec;
use crate::data::{DomainDataset, SensorWindow};
use crate::error::{HaroodError, Result};

const MAGIC: &[u8; 4] = b"HRDB";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub scenario: ScenarioKind,
    pub dataset: Vec<String>,
    pub split_table: Vec<Vec<usize>>,
    pub shape: [usize; 3],
    pub class_count: usize,
    pub domain_count: usize,
    pub normalization: NormalizationSpec,
    pub windowing: WindowingSpec,
    /// SHA-256 over the domain files, in domain order.
    pub checksum: String,
    pub domain_sizes: Vec<usize>,
    pub spec: ScenarioSpec,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn encode_domain(d: &DomainDataset) -> Vec<u8> {
    let [c, _, t] = d.shape();
    let mut out = Vec::with_capacity(16 + d.len() * (12 + 4 * c * t));
    out.extend(MAGIC);
    out.extend((d.len() as u32).to_le_bytes());
    out.extend((c as u32).to_le_bytes());
    out.extend((t as u32).to_le_bytes());
    for w in d.windows() {
        out.extend((w.label as u32).to_le_bytes());
        out.extend((w.timestamp_index as u64).to_le_bytes());
        for &v in w.values() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    out
}

fn decode_domain(path: &Path, bytes: &[u8], domain_id: usize, class_count: usize) -> Result<DomainDataset> {
    let bad = || HaroodError::ingestion(path, "truncated or malformed domain file");
    let word = |at: usize| -> Result<usize> {
        let b = bytes.get(at..at + 4).ok_or_else(bad)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad());
    }
    let (n, c, t) = (word(4)?, word(8)?, word(12)?);
    let mut pos = 16;
    let mut windows = Vec::with_capacity(n);
    for _ in 0..n {
        let label = word(pos)?;
        let ts_bytes = bytes.get(pos + 4..pos + 12).ok_or_else(bad)?;
        let ts = u64::from_le_bytes(ts_bytes.try_into().expect("8 bytes")) as usize;
        pos += 12;
        let raw = bytes.get(pos..pos + 4 * c * t).ok_or_else(bad)?;
        pos += 4 * c * t;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        windows.push(SensorWindow::new(values, c, t, label, domain_id, ts)?);
    }
    DomainDataset::new(windows, domain_id, class_count)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn save_bundle(bundle: &ScenarioBundle, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let mut hasher = Sha256::new();
    for d in &bundle.domains {
        let bytes = encode_domain(d);
        hasher.update(&bytes);
        write_atomic(&dir.join(format!("domain_{}.bin", d.domain_id)), &bytes)?;
    }
    let manifest = BundleManifest {
        scenario: bundle.spec.scenario,
        dataset: bundle.spec.datasets.iter().map(|d| d.name().to_string()).collect(),
        split_table: bundle.spec.split_table.clone(),
        shape: bundle.shape(),
        class_count: bundle.class_count,
        domain_count: bundle.domain_count(),
        normalization: bundle.spec.normalization,
        windowing: bundle.spec.windowing,
        checksum: hex(&hasher.finalize()),
        domain_sizes: bundle.domains.iter().map(DomainDataset::len).collect(),
        spec: bundle.spec.clone(),
        metadata: bundle.metadata.clone(),
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_bundle(dir: &Path) -> Result<ScenarioBundle> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| HaroodError::ingestion(&mpath, e.to_string()))?;
    let manifest: BundleManifest =
        serde_json::from_slice(&bytes).map_err(|e| HaroodError::ingestion(&mpath, e.to_string()))?;
    let mut hasher = Sha256::new();
    let mut domains = Vec::with_capacity(manifest.domain_count);
    for i in 0..manifest.domain_count {
        let path = dir.join(format!("domain_{i}.bin"));
        let bytes = fs::read(&path).map_err(|e| HaroodError::ingestion(&path, e.to_string()))?;
        hasher.update(&bytes);
        domains.push(decode_domain(&path, &bytes, i, manifest.class_count)?);
    }
    if hex(&hasher.finalize()) != manifest.checksum {
        return Err(HaroodError::ingestion(&mpath, "checksum mismatch"));
    }
    ScenarioBundle::new(domains, manifest.spec, manifest.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::registry::DatasetId;

    fn tiny_bundle() -> ScenarioBundle {
        let mut spec = ScenarioSpec::default_for(ScenarioKind::CrossTime, DatasetId::Emg).unwrap();
        spec.split_table = vec![vec![0], vec![1]];
        spec.domain_count = 2;
        let domains = (0..2)
            .map(|d| {
                let w = (0..3)
                    .map(|i| SensorWindow::new(vec![0.25 * (i + d) as f64; 8], 2, 4, i % 2, d, 4 * i).unwrap())
                    .collect();
                DomainDataset::new(w, d, 6).unwrap()
            })
            .collect();
        ScenarioBundle::new(domains, spec, BTreeMap::new()).unwrap()
    }

    #[test]
    fn bundle_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        let m = save_bundle(&b, dir.path()).unwrap();
        assert_eq!(m.domain_sizes, vec![3, 3]);
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, b);

        fs::write(dir.path().join("domain_1.bin"), b"HRDB\0\0\0\0\0\0\0\0\0\0\0\0").unwrap();
        assert!(load_bundle(dir.path()).is_err());
    }
}
