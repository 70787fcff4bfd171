//! Binary model checkpoints: a JSON header followed by little-endian `f32` arrays.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{ModelBundle, ModelSpec};
use super::tensor::Tensor;
use crate::error::{HaroodError, Result};

const MAGIC: &[u8; 4] = b"HRDM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn collect(model: &ModelBundle) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params
        .names()
        .iter()
        .cloned()
        .zip(model.params.values().iter().cloned())
        .collect();
    for (i, buf) in model.buffers.iter().enumerate() {
        out.push((format!("bn{i}.running_mean"), Tensor::vector(buf.mean.clone())));
        out.push((format!("bn{i}.running_var"), Tensor::vector(buf.var.clone())));
    }
    out
}

pub fn write_checkpoint<W: Write>(model: &ModelBundle, mut w: W) -> Result<()> {
    let arrays = collect(model);
    let header = Header {
        spec: model.spec().clone(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &arrays {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelBundle> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(HaroodError::Shape("not a model checkpoint".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(HaroodError::Shape(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut model = ModelBundle::from_spec(&header.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = collect(&model);
    if expected.len() != header.arrays.len() {
        return Err(HaroodError::Shape(format!(
            "checkpoint has {} arrays, model expects {}",
            header.arrays.len(),
            expected.len()
        )));
    }
    let param_count = model.params.len();
    for (i, (entry, (name, t))) in header.arrays.iter().zip(&expected).enumerate() {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(HaroodError::Shape(format!(
                "checkpoint array {} {:?} does not match model array {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.len());
        let mut buf = [0u8; 4];
        for _ in 0..t.len() {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        if i < param_count {
            model.params.set(i, Tensor::new(entry.shape.clone(), data));
        } else {
            let b = (i - param_count) / 2;
            if (i - param_count) % 2 == 0 {
                model.buffers[b].mean = data;
            } else {
                model.buffers[b].var = data;
            }
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelBundle, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::backbone::{BackboneConfig, LagBranchConfig};

    #[test]
    fn round_trip_preserves_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = [3, 1, 24];
        let mut model = ModelBundle::new(BackboneConfig::cnn(shape), 4, &mut rng)
            .unwrap()
            .attach_lag_branch(&LagBranchConfig::default(), &mut rng)
            .unwrap()
            .with_discriminator(2, &mut rng)
            .unwrap();
        model.buffers[1].mean = vec![0.25; model.buffers[1].mean.len()];
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.spec(), model.spec());
        let x = Tensor::new(vec![2, 3, 1, 24], (0..144).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = model.predict_logits(&x).unwrap();
        let b = back.predict_logits(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(read_checkpoint(&b"nope"[..]).is_err());
    }
}
