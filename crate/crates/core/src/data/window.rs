use serde::{Deserialize, Serialize};

use super::SensorWindow;
use crate::error::{HaroodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowingSpec {
    pub window_length: usize,
    pub step: usize,
    pub channel_count: usize,
}

impl WindowingSpec {
    pub fn new(window_length: usize, step: usize, channel_count: usize) -> Result<Self> {
        let spec = WindowingSpec {
            window_length,
            step,
            channel_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step == 0 || self.window_length == 0 {
            return Err(HaroodError::Config(format!(
                "window length and step must be positive, got length {} step {}",
                self.window_length, self.step
            )));
        }
        if self.channel_count == 0 {
            return Err(HaroodError::Config("channel_count must be positive".into()));
        }
        Ok(())
    }

    /// Number of windows a stream of `len` steps yields.
    pub fn count(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            (len - self.window_length) / self.step + 1
        }
    }
}

/// Cuts a row-major `time × channels` stream into `(channels, 1, T)` windows.
pub fn sliding_window(
    stream: &[f64],
    spec: &WindowingSpec,
    label: usize,
    domain_id: usize,
) -> Result<Vec<SensorWindow>> {
    spec.validate()?;
    let c = spec.channel_count;
    if !stream.len().is_multiple_of(c) {
        return Err(HaroodError::Windowing(format!(
            "{} samples do not divide into {c} channels",
            stream.len()
        )));
    }
    let len = stream.len() / c;
    let t = spec.window_length;
    if len < t {
        return Err(HaroodError::Windowing(format!(
            "stream of {len} steps is shorter than window length {t}"
        )));
    }
    (0..spec.count(len))
        .map(|k| {
            let start = k * spec.step;
            let mut values = vec![0.0; c * t];
            for (i, row) in stream[start * c..(start + t) * c].chunks_exact(c).enumerate() {
                for (ch, &v) in row.iter().enumerate() {
                    values[ch * t + i] = v;
                }
            }
            SensorWindow::new(values, c, t, label, domain_id, start)
        })
        .collect()
}

/// Positions kept when decimating `length` steps to `target`.
pub fn downsample_indices(length: usize, target: usize) -> Result<Vec<usize>> {
    if target == 0 || target > length {
        return Err(HaroodError::Config(format!(
            "cannot downsample length {length} to {target}"
        )));
    }
    if target == 1 {
        return Ok(vec![0]);
    }
    let ratio = (length - 1) as f64 / (target - 1) as f64;
    Ok((0..target).map(|k| (k as f64 * ratio).round() as usize).collect())
}

/// Nearest-index decimation of every channel to `target_length` steps.
pub fn downsample(window: &SensorWindow, target_length: usize) -> Result<SensorWindow> {
    let idx = downsample_indices(window.length(), target_length)?;
    let mut values = Vec::with_capacity(window.channels() * target_length);
    for c in 0..window.channels() {
        let ch = window.channel(c);
        values.extend(idx.iter().map(|&i| ch[i]));
    }
    SensorWindow::new(
        values,
        window.channels(),
        target_length,
        window.label,
        window.domain_id,
        window.timestamp_index,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, channels: usize) -> Vec<f64> {
        (0..len * channels).map(|i| i as f64).collect()
    }

    #[test]
    fn window_starts_follow_step() {
        let spec = WindowingSpec::new(200, 100, 1).unwrap();
        let w = sliding_window(&ramp(500, 1), &spec, 0, 0).unwrap();
        let starts: Vec<usize> = w.iter().map(|w| w.timestamp_index).collect();
        assert_eq!(starts, vec![0, 100, 200, 300]);
        assert_eq!(sliding_window(&ramp(200, 1), &spec, 0, 0).unwrap().len(), 1);
    }

    #[test]
    fn provider_window_keeps_shape() {
        let spec = WindowingSpec::new(125, 125, 45).unwrap();
        let w = sliding_window(&ramp(125, 45), &spec, 3, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].shape(), [45, 1, 125]);
        // row-major stream: sample t of channel c sits at t·45 + c
        assert_eq!(w[0].channel(2)[10], (10 * 45 + 2) as f64);
    }

    #[test]
    fn short_stream_and_bad_step_are_errors() {
        let spec = WindowingSpec {
            window_length: 10,
            step: 5,
            channel_count: 1,
        };
        assert!(matches!(
            sliding_window(&ramp(9, 1), &spec, 0, 0),
            Err(HaroodError::Windowing(_))
        ));
        assert!(matches!(WindowingSpec::new(10, 0, 1), Err(HaroodError::Config(_))));
    }

    #[test]
    fn downsample_uses_rounded_uniform_stride() {
        let idx = downsample_indices(200, 50).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            let exact = k as f64 * 199.0 / 49.0;
            assert!((i as f64 - exact).abs() <= 0.5);
        }
        assert_eq!(idx[0], 0);
        assert_eq!(idx[49], 199);
        assert_eq!(downsample_indices(50, 50).unwrap(), (0..50).collect::<Vec<_>>());
        assert!(downsample_indices(50, 51).is_err());
        assert!(downsample_indices(50, 0).is_err());
    }

    #[test]
    fn uci_windows_reach_cross_dataset_length() {
        let spec = WindowingSpec::new(128, 128, 6).unwrap();
        let w = sliding_window(&ramp(128, 6), &spec, 0, 0).unwrap();
        let d = downsample(&w[0], 50).unwrap();
        assert_eq!(d.shape(), [6, 1, 50]);
    }
}
