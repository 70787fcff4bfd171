//! Windowed sensor samples, normalization, dataset ingestion and synthetic suites.

pub mod cache;
pub mod matfile;
pub mod mock;
pub mod normalize;
pub mod registry;
pub mod synthetic;
pub mod window;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HaroodError, Result};
use crate::nn::tensor::Tensor;

pub use normalize::{normalize, NormalizationMode, NormalizationSpec, StatisticsScope};
pub use window::{downsample, sliding_window, WindowingSpec};

/// One fixed-length multichannel sample laid out as `(channels, 1, length)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorWindow {
    values: Vec<f64>,
    channels: usize,
    length: usize,
    pub label: usize,
    pub domain_id: usize,
    /// Start position of the window in its source stream.
    pub timestamp_index: usize,
}

impl SensorWindow {
    /// `values` is channel-major: channel `c` occupies `[c·length, (c+1)·length)`.
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        length: usize,
        label: usize,
        domain_id: usize,
        timestamp_index: usize,
    ) -> Result<Self> {
        if channels == 0 || length == 0 || values.len() != channels * length {
            return Err(HaroodError::Shape(format!(
                "{} values cannot form a ({channels}, 1, {length}) window",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HaroodError::Shape(format!("non-finite value at position {i}")));
        }
        Ok(SensorWindow {
            values,
            channels,
            length,
            label,
            domain_id,
            timestamp_index,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, 1, self.length]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.length..(c + 1) * self.length]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Replaces the values, keeping shape and labels; used by normalization.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        SensorWindow {
            values,
            ..self.clone()
        }
    }

    /// Keeps the channels `[start, end)`.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.channels {
            return Err(HaroodError::Shape(format!(
                "channel range {start}..{end} outside 0..{}",
                self.channels
            )));
        }
        Ok(SensorWindow {
            values: self.values[start * self.length..end * self.length].to_vec(),
            channels: end - start,
            ..self.clone()
        })
    }

    /// Keeps the listed channels in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(channels.len() * self.length);
        for &c in channels {
            if c >= self.channels {
                return Err(HaroodError::Shape(format!(
                    "channel {c} outside 0..{}",
                    self.channels
                )));
            }
            values.extend_from_slice(self.channel(c));
        }
        SensorWindow::new(
            values,
            channels.len(),
            self.length,
            self.label,
            self.domain_id,
            self.timestamp_index,
        )
    }
}

/// All windows of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    windows: Vec<SensorWindow>,
    pub domain_id: usize,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn new(windows: Vec<SensorWindow>, domain_id: usize, class_count: usize) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| HaroodError::Split(format!("domain {domain_id} has no windows")))?;
        let shape = first.shape();
        for w in &windows {
            if w.shape() != shape {
                return Err(HaroodError::Shape(format!(
                    "domain {domain_id} mixes shapes {shape:?} and {:?}",
                    w.shape()
                )));
            }
            if w.domain_id != domain_id {
                return Err(HaroodError::Split(format!(
                    "window tagged domain {} inside domain {domain_id}",
                    w.domain_id
                )));
            }
            if w.label >= class_count {
                return Err(HaroodError::Shape(format!(
                    "label {} outside 0..{class_count}",
                    w.label
                )));
            }
        }
        Ok(DomainDataset {
            windows,
            domain_id,
            class_count,
        })
    }

    pub fn windows(&self) -> &[SensorWindow] {
        &self.windows
    }

    pub fn into_windows(self) -> Vec<SensorWindow> {
        self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.windows[0].shape()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for w in &self.windows {
            h[w.label] += 1;
        }
        h
    }

    /// Stacks the selected windows into an `(n, C, 1, T)` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        stack_windows(indices.iter().map(|&i| &self.windows[i]))
    }
}

/// Stacks windows of one shape into `(n, C, 1, T)` plus their labels.
pub fn stack_windows<'a>(windows: impl IntoIterator<Item = &'a SensorWindow>) -> (Tensor, Vec<usize>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape = [0, 1, 0];
    for w in windows {
        shape = w.shape();
        data.extend_from_slice(w.values());
        labels.push(w.label);
    }
    let n = labels.len();
    (Tensor::new(vec![n, shape[0], 1, shape[2]], data), labels)
}

/// A raw time × channel stream of one activity bout of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecording {
    /// Row-major `time × channels`.
    stream: Vec<f64>,
    channels: usize,
    pub subject_id: usize,
    pub activity_label: usize,
    pub metadata: BTreeMap<String, String>,
}

impl RawRecording {
    pub fn new(
        stream: Vec<f64>,
        channels: usize,
        subject_id: usize,
        activity_label: usize,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        if channels == 0 || !stream.len().is_multiple_of(channels) {
            return Err(HaroodError::Shape(format!(
                "{} samples do not divide into {channels} channels",
                stream.len()
            )));
        }
        if stream.iter().any(|v| !v.is_finite()) {
            return Err(HaroodError::Shape("recording contains non-finite values".into()));
        }
        Ok(RawRecording {
            stream,
            channels,
            subject_id,
            activity_label,
            metadata,
        })
    }

    pub fn stream(&self) -> &[f64] {
        &self.stream
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn time_steps(&self) -> usize {
        self.stream.len() / self.channels
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }
}
