use serde::{Deserialize, Serialize};

use super::SensorWindow;
use crate::error::{HaroodError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    MinMax,
    ZScore,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticsScope {
    #[default]
    GlobalOverAllSamples,
    PerChannel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    #[serde(default)]
    pub statistics_scope: StatisticsScope,
}

impl NormalizationSpec {
    pub fn new(mode: NormalizationMode, statistics_scope: StatisticsScope) -> Self {
        NormalizationSpec {
            mode,
            statistics_scope,
        }
    }
}

/// `x̃ = (x − offset) / scale`; a zero scale marks a degenerate group mapped to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineStats {
    pub offset: f64,
    pub scale: f64,
}

impl AffineStats {
    fn identity() -> Self {
        AffineStats {
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            (x - self.offset) / self.scale
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }

    pub fn is_degenerate(&self) -> bool {
        self.scale == 0.0
    }
}

/// Fitted statistics: one entry for the global scope, one per channel otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub spec: NormalizationSpec,
    pub stats: Vec<AffineStats>,
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub windows: Vec<SensorWindow>,
    pub normalizer: Normalizer,
    /// One message per degenerate statistics group.
    pub warnings: Vec<String>,
}

fn group_values<'a>(
    samples: &'a [SensorWindow],
    scope: StatisticsScope,
    group: usize,
) -> Box<dyn Iterator<Item = f64> + 'a> {
    match scope {
        StatisticsScope::GlobalOverAllSamples => {
            Box::new(samples.iter().flat_map(|w| w.values().iter().copied()))
        }
        StatisticsScope::PerChannel => {
            Box::new(samples.iter().flat_map(move |w| w.channel(group).iter().copied()))
        }
    }
}

impl Normalizer {
    pub fn fit(samples: &[SensorWindow], spec: NormalizationSpec) -> Result<(Self, Vec<String>)> {
        let first = samples
            .first()
            .ok_or_else(|| HaroodError::Config("cannot fit normalization on zero samples".into()))?;
        let channels = first.channels();
        if samples.iter().any(|w| w.channels() != channels) {
            return Err(HaroodError::Shape("samples disagree on channel count".into()));
        }
        let groups = match spec.statistics_scope {
            StatisticsScope::GlobalOverAllSamples => 1,
            StatisticsScope::PerChannel => channels,
        };
        let mut warnings = Vec::new();
        let stats = (0..groups)
            .map(|g| {
                let st = match spec.mode {
                    NormalizationMode::None => AffineStats::identity(),
                    NormalizationMode::MinMax => {
                        let (lo, hi) = group_values(samples, spec.statistics_scope, g)
                            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                                (lo.min(v), hi.max(v))
                            });
                        AffineStats {
                            offset: lo,
                            scale: if hi > lo { hi - lo } else { 0.0 },
                        }
                    }
                    NormalizationMode::ZScore => {
                        let (n, sum) = group_values(samples, spec.statistics_scope, g)
                            .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
                        let mean = sum / n as f64;
                        let ss: f64 = group_values(samples, spec.statistics_scope, g)
                            .map(|v| (v - mean) * (v - mean))
                            .sum();
                        let std = (ss / n as f64).sqrt();
                        AffineStats {
                            offset: mean,
                            scale: if std > 0.0 { std } else { 0.0 },
                        }
                    }
                };
                if st.is_degenerate() {
                    let msg = match spec.statistics_scope {
                        StatisticsScope::GlobalOverAllSamples => {
                            "all samples are constant; normalized to 0".to_string()
                        }
                        StatisticsScope::PerChannel => {
                            format!("channel {g} is constant; normalized to 0")
                        }
                    };
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                st
            })
            .collect();
        Ok((Normalizer { spec, stats }, warnings))
    }

    fn stats_for(&self, channel: usize) -> &AffineStats {
        match self.spec.statistics_scope {
            StatisticsScope::GlobalOverAllSamples => &self.stats[0],
            StatisticsScope::PerChannel => &self.stats[channel],
        }
    }

    fn map(&self, window: &SensorWindow, f: impl Fn(&AffineStats, f64) -> f64) -> Result<SensorWindow> {
        if self.spec.statistics_scope == StatisticsScope::PerChannel && window.channels() != self.stats.len() {
            return Err(HaroodError::Shape(format!(
                "normalizer fitted on {} channels, window has {}",
                self.stats.len(),
                window.channels()
            )));
        }
        let t = window.length();
        let values = window
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(self.stats_for(i / t), v))
            .collect();
        Ok(window.with_values(values))
    }

    pub fn apply(&self, window: &SensorWindow) -> Result<SensorWindow> {
        self.map(window, |s, v| s.apply(v))
    }

    pub fn invert(&self, window: &SensorWindow) -> Result<SensorWindow> {
        self.map(window, |s, v| s.invert(v))
    }
}

/// Fits statistics on `samples` and applies them to every sample.
pub fn normalize(samples: &[SensorWindow], spec: NormalizationSpec) -> Result<Normalized> {
    let (normalizer, warnings) = Normalizer::fit(samples, spec)?;
    let windows = samples
        .iter()
        .map(|w| normalizer.apply(w))
        .collect::<Result<_>>()?;
    Ok(Normalized {
        windows,
        normalizer,
        warnings,
    })
}

pub fn minmax_normalize(samples: &[SensorWindow], scope: StatisticsScope) -> Result<Normalized> {
    normalize(samples, NormalizationSpec::new(NormalizationMode::MinMax, scope))
}

pub fn zscore_normalize(samples: &[SensorWindow], scope: StatisticsScope) -> Result<Normalized> {
    normalize(samples, NormalizationSpec::new(NormalizationMode::ZScore, scope))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(values: &[f64]) -> Vec<SensorWindow> {
        vec![SensorWindow::new(values.to_vec(), 1, values.len(), 0, 0, 0).unwrap()]
    }

    fn out(n: &Normalized) -> Vec<f64> {
        n.windows[0].values().to_vec()
    }

    #[test]
    fn minmax_examples() {
        let n = minmax_normalize(&one(&[0.0, 5.0, 10.0]), StatisticsScope::GlobalOverAllSamples).unwrap();
        assert_eq!(out(&n), vec![0.0, 0.5, 1.0]);
        let n = minmax_normalize(&one(&[-1.0, 0.0, 3.0]), StatisticsScope::GlobalOverAllSamples).unwrap();
        assert_eq!(out(&n), vec![0.0, 0.25, 1.0]);
        let n = minmax_normalize(&one(&[2.0, 2.0, 2.0]), StatisticsScope::GlobalOverAllSamples).unwrap();
        assert_eq!(out(&n), vec![0.0; 3]);
        assert_eq!(n.warnings.len(), 1);
    }

    #[test]
    fn zscore_examples() {
        let n = zscore_normalize(&one(&[0.0, 10.0]), StatisticsScope::GlobalOverAllSamples).unwrap();
        assert_eq!(out(&n), vec![-1.0, 1.0]);
        let n = zscore_normalize(&one(&[3.0, 3.0, 3.0]), StatisticsScope::PerChannel).unwrap();
        assert_eq!(out(&n), vec![0.0; 3]);
        assert_eq!(n.warnings.len(), 1);
    }

    #[test]
    fn per_channel_scope_uses_separate_statistics() {
        let w = vec![SensorWindow::new(vec![0.0, 2.0, 10.0, 30.0], 2, 2, 0, 0, 0).unwrap()];
        let n = minmax_normalize(&w, StatisticsScope::PerChannel).unwrap();
        assert_eq!(out(&n), vec![0.0, 1.0, 0.0, 1.0]);
        let g = minmax_normalize(&w, StatisticsScope::GlobalOverAllSamples).unwrap();
        assert_eq!(out(&g), vec![0.0, 2.0 / 30.0, 10.0 / 30.0, 1.0]);
    }
}
