//! Metrics, train/validation splits, training runs, model selection and rank aggregation.

pub mod protocol;
pub mod selection;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_windows, DomainDataset, SensorWindow};
use crate::error::{HaroodError, Result};
use crate::nn::backbone::ModelBundle;
use crate::nn::params::ParamStore;

pub use protocol::{
    derive_seed, grid_jobs, run_grid, train_run, EpochMetrics, FinalMetrics, Grid, GridSpec, HyperParams, Job,
    RunRecord, TrainedRun, train_run_with_model,
};
pub use selection::{
    aggregate_ranks, fractional_ranks, select, select_by_mean_validation, select_by_oracle, select_by_validation,
    mean_and_stderr, RankTable, Selection, SelectionKind, SelectionProtocol, TrialChoice,
};

pub const EVAL_BATCH: usize = 256;

/// Argmax predictions in evaluation mode, `EVAL_BATCH` windows at a time.
pub fn predict(model: &ModelBundle, params: &ParamStore, windows: &[SensorWindow]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let (x, _) = stack_windows(chunk);
        out.extend(model.predict_logits_with(params, &x)?.argmax_rows());
    }
    Ok(out)
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if truth.is_empty() {
        return Err(HaroodError::Eval("evaluation set is empty".into()));
    }
    if pred.len() != truth.len() {
        return Err(HaroodError::Eval(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes present in `truth`.
pub fn macro_f1(pred: &[usize], truth: &[usize], class_count: usize) -> Result<f64> {
    let cm = ConfusionMatrix::from_predictions(pred, truth, class_count)?;
    Ok(cm.macro_f1())
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(pred: &[usize], truth: &[usize], class_count: usize) -> Result<Self> {
        check_lengths(pred, truth)?;
        let mut counts = vec![vec![0; class_count]; class_count];
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= class_count || t >= class_count {
                return Err(HaroodError::Eval(format!("class index outside 0..{class_count}")));
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    /// F1 per class, `None` for classes with no true samples.
    pub fn per_class_f1(&self) -> Vec<Option<f64>> {
        let c = self.counts.len();
        (0..c)
            .map(|k| {
                let support: usize = self.counts[k].iter().sum();
                if support == 0 {
                    return None;
                }
                let tp = self.counts[k][k] as f64;
                let predicted: usize = (0..c).map(|r| self.counts[r][k]).sum();
                let fp = predicted as f64 - tp;
                let fn_ = support as f64 - tp;
                Some(2.0 * tp / (2.0 * tp + fp + fn_))
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = self.per_class_f1().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Accuracy, macro-F1 and confusion of one model on one window set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &ModelBundle, params: &ParamStore, windows: &[SensorWindow]) -> Result<EvalResult> {
    if windows.is_empty() {
        return Err(HaroodError::Eval("evaluation set is empty".into()));
    }
    let pred = predict(model, params, windows)?;
    let truth: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let confusion = ConfusionMatrix::from_predictions(&pred, &truth, model.class_count())?;
    Ok(EvalResult {
        accuracy: confusion.accuracy(),
        macro_f1: confusion.macro_f1(),
        confusion,
    })
}

pub fn evaluate_accuracy(model: &ModelBundle, params: &ParamStore, windows: &[SensorWindow]) -> Result<f64> {
    let pred = predict(model, params, windows)?;
    let truth: Vec<usize> = windows.iter().map(|w| w.label).collect();
    accuracy(&pred, &truth)
}

/// Source domains split into training domains and a pooled validation set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainValid {
    pub train: Vec<DomainDataset>,
    pub valid: Vec<SensorWindow>,
}

/// Stratified by (domain, class). The validation total is `round(fraction·N)`,
/// spread over groups by largest remainder; every group keeps at least one
/// training sample, so singleton groups stay whole in training.
pub fn split_train_valid(sources: &[DomainDataset], fraction: f64, seed: u64) -> Result<TrainValid> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HaroodError::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    if sources.is_empty() {
        return Err(HaroodError::Split("no source domains to split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (d, ds) in sources.iter().enumerate() {
        for c in 0..ds.class_count {
            let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.windows()[i].label == c).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            groups.push((d, idx));
        }
    }
    let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let target = (fraction * total as f64).round() as usize;
    let caps: Vec<usize> = groups.iter().map(|(_, g)| g.len() - 1).collect();
    let mut take: Vec<usize> = groups
        .iter()
        .zip(&caps)
        .map(|((_, g), &cap)| ((fraction * g.len() as f64).floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let remainder = |i: usize| fraction * groups[i].1.len() as f64 - take[i] as f64;
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
    let mut assigned: usize = take.iter().sum();
    while assigned < target {
        let mut progressed = false;
        for &i in &order {
            if assigned >= target {
                break;
            }
            if take[i] < caps[i] {
                take[i] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut train_idx: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut valid = Vec::with_capacity(target);
    for ((d, idx), &k) in groups.iter().zip(&take) {
        for &i in &idx[..k] {
            valid.push(sources[*d].windows()[i].clone());
        }
        train_idx[*d].extend_from_slice(&idx[k..]);
    }
    let train = sources
        .iter()
        .zip(train_idx)
        .map(|(ds, mut idx)| {
            idx.sort_unstable();
            let w = idx.iter().map(|&i| ds.windows()[i].clone()).collect();
            DomainDataset::new(w, ds.domain_id, ds.class_count)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainValid { train, valid })
}

/// Seconds per repetition of a full forward pass over `windows`, after one warmup pass.
pub fn inference_timing(
    model: &ModelBundle,
    params: &ParamStore,
    windows: &[SensorWindow],
    repetitions: usize,
) -> Result<f64> {
    if repetitions == 0 {
        return Err(HaroodError::Config("timing needs at least one repetition".into()));
    }
    if windows.is_empty() {
        return Err(HaroodError::Eval("evaluation set is empty".into()));
    }
    predict(model, params, windows)?;
    let start = Instant::now();
    for _ in 0..repetitions {
        std::hint::black_box(predict(model, params, windows)?);
    }
    Ok(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE) / repetitions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_f1_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0; 8], &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap(), 0.25);
        assert!(matches!(accuracy(&[], &[]), Err(HaroodError::Eval(_))));
        // class 0 perfect; class 1 has precision 1/2, recall 1/2
        let f1 = macro_f1(&[0, 0, 1, 1, 2], &[0, 0, 1, 2, 1], 3).unwrap();
        let class2 = 0.0;
        assert!((f1 - (1.0 + 0.5 + class2) / 3.0).abs() < 1e-12);
        let f1 = macro_f1(&[0, 0, 1, 0], &[0, 0, 1, 1], 4).unwrap();
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_tally() {
        let cm = ConfusionMatrix::from_predictions(&[1, 0, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(cm.total(), 3);
    }

    fn domain(d: usize, labels: &[usize]) -> DomainDataset {
        let w = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| SensorWindow::new(vec![i as f64; 4], 1, 4, y, d, i).unwrap())
            .collect();
        DomainDataset::new(w, d, 3).unwrap()
    }

    #[test]
    fn split_sizes_and_singletons() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let s = split_train_valid(&[domain(0, &labels)], 0.2, 1).unwrap();
        assert_eq!((s.train[0].len(), s.valid.len()), (80, 20));
        let again = split_train_valid(&[domain(0, &labels)], 0.2, 1).unwrap();
        assert_eq!(s, again);

        let mut labels = vec![0; 9];
        labels.push(2);
        let s = split_train_valid(&[domain(0, &labels)], 0.2, 3).unwrap();
        assert!(s.train[0].windows().iter().any(|w| w.label == 2));
        assert!(s.valid.iter().all(|w| w.label == 0));
    }
}
