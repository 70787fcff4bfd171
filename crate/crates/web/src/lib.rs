//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns JSON strings; the plain `*_json` functions
//! hold the logic so they can be tested natively.

use harood_core::analysis::{pairwise_domain_distances, CostAggregation, DistanceOptions};
use harood_core::data::synthetic::{make_synthetic_suite, SyntheticShiftSpec};
use harood_core::eval::aggregate_ranks;
use harood_core::{HaroodError, Result};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Domain count and shift knobs exposed by the page.
#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct ShiftControls {
    pub domains: usize,
    pub classes: usize,
    pub length: usize,
    pub amplitude_spread: f64,
    pub phase_step: f64,
    pub noise_std: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ShiftControls {
    fn default() -> Self {
        ShiftControls {
            domains: 3,
            classes: 4,
            length: 64,
            amplitude_spread: 0.2,
            phase_step: 0.0,
            noise_std: 0.1,
            samples: 20,
            seed: 0,
        }
    }
}

impl ShiftControls {
    fn spec(&self) -> SyntheticShiftSpec {
        SyntheticShiftSpec {
            domain_count: self.domains,
            class_count: self.classes,
            channels: 1,
            length: self.length,
            amplitude_shift: SyntheticShiftSpec::amplitude_ladder(self.domains, self.amplitude_spread),
            phase_shift: (0..self.domains).map(|d| d as f64 * self.phase_step).collect(),
            channel_gain: Vec::new(),
            noise_std: self.noise_std,
            samples_per_class_per_domain: self.samples,
            seed: self.seed,
        }
    }
}

#[derive(Serialize)]
struct Preview {
    /// `traces[domain][class]` is the first window of that class.
    traces: Vec<Vec<Vec<f64>>>,
    amplitudes: Vec<f64>,
}

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> Result<T> {
    Ok(serde_json::from_str(json)?)
}

pub fn synthetic_preview_json(controls: &str) -> Result<String> {
    let c: ShiftControls = parse(controls)?;
    let spec = c.spec();
    let domains = make_synthetic_suite(&spec)?;
    let traces = domains
        .iter()
        .map(|d| {
            (0..spec.class_count)
                .map(|k| {
                    d.windows()
                        .iter()
                        .find(|w| w.label == k)
                        .map(|w| w.values().to_vec())
                        .unwrap_or_default()
                })
                .collect()
        })
        .collect();
    let amplitudes = spec.amplitude_shift.iter().map(|a| 1.0 + a).collect();
    Ok(serde_json::to_string(&Preview { traces, amplitudes })?)
}

#[derive(Deserialize)]
#[serde(default)]
struct DistanceRequest {
    #[serde(flatten)]
    controls: ShiftControls,
    sample_cap: usize,
    bins: usize,
    summed: bool,
}

impl Default for DistanceRequest {
    fn default() -> Self {
        DistanceRequest {
            controls: ShiftControls::default(),
            sample_cap: 200,
            bins: 100,
            summed: false,
        }
    }
}

pub fn shift_distances_json(request: &str) -> Result<String> {
    let req: DistanceRequest = parse(request)?;
    let domains = make_synthetic_suite(&req.controls.spec())?;
    let opts = DistanceOptions {
        sample_cap: req.sample_cap,
        bins: req.bins,
        seed: req.controls.seed,
        aggregation: if req.summed {
            CostAggregation::Summed
        } else {
            CostAggregation::Normalized
        },
        ..DistanceOptions::default()
    };
    let report = pairwise_domain_distances("synthetic", &domains, &opts)?;
    Ok(serde_json::to_string(&report)?)
}

#[derive(Deserialize)]
struct RankRequest {
    methods: Vec<String>,
    tasks: Vec<String>,
    accuracy: Vec<Vec<f64>>,
}

pub fn rank_table_json(request: &str) -> Result<String> {
    let req: RankRequest = parse(request)?;
    if req.accuracy.iter().flatten().any(|v| !v.is_finite()) {
        return Err(HaroodError::Config("accuracies must be numbers".into()));
    }
    let table = aggregate_ranks(req.methods, req.tasks, req.accuracy)?;
    Ok(serde_json::to_string(&table)?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn synthetic_preview(controls: &str) -> std::result::Result<String, JsError> {
    js(synthetic_preview_json(controls))
}

#[wasm_bindgen]
pub fn shift_distances(request: &str) -> std::result::Result<String, JsError> {
    js(shift_distances_json(request))
}

#[wasm_bindgen]
pub fn rank_table(request: &str) -> std::result::Result<String, JsError> {
    js(rank_table_json(request))
}
