//! Stand-in recordings with each dataset's subject count, channel count and label set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::registry::DatasetId;
use super::RawRecording;
use crate::error::Result;

/// One recording per (subject, class), long enough for `windows_per_recording` native windows.
pub fn mock_recordings(dataset: DatasetId, windows_per_recording: usize, seed: u64) -> Result<Vec<RawRecording>> {
    let info = dataset.info();
    let channels = info.channel_names.len();
    let steps = info.default_window + windows_per_recording.saturating_sub(1) * info.default_step;
    let mut out = Vec::with_capacity(info.subjects * info.class_count);
    for subject in 0..info.subjects {
        for class in 0..info.class_count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((subject as u64) << 32) ^ ((class as u64) << 8) ^ dataset as u64);
            let freq = 2.0 * std::f64::consts::PI * (class + 1) as f64 / info.default_window as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut stream = Vec::with_capacity(steps * channels);
            for t in 0..steps {
                for c in 0..channels {
                    let v = (freq * t as f64 + phase + c as f64).sin() + 0.05 * rng.random_range(-1.0..1.0);
                    stream.push(v);
                }
            }
            let mut meta = BTreeMap::new();
            meta.insert("dataset".into(), dataset.name().into());
            meta.insert("mock".into(), "true".into());
            out.push(RawRecording::new(stream, channels, subject, class, meta)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_matches_catalogue() {
        let recs = mock_recordings(DatasetId::Wesad, 2, 1).unwrap();
        let info = DatasetId::Wesad.info();
        assert_eq!(recs.len(), info.subjects * info.class_count);
        assert!(recs.iter().all(|r| r.channels() == 8 && r.time_steps() == 300));
    }
}
