//! Model selection over run records and rank aggregation across tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::RunRecord;
use crate::error::{HaroodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    #[serde(alias = "validation", alias = "valid", alias = "train_domain_validation")]
    TrainingDomainValidation,
    Oracle,
}

impl SelectionKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "training_domain_validation" | "train_domain_validation" | "validation" | "valid" => {
                Ok(SelectionKind::TrainingDomainValidation)
            }
            "oracle" => Ok(SelectionKind::Oracle),
            other => Err(HaroodError::Config(format!("unknown selection protocol `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionKind::TrainingDomainValidation => "training_domain_validation",
            SelectionKind::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionProtocol {
    pub kind: SelectionKind,
    pub validation_fraction: f64,
}

impl Default for SelectionProtocol {
    fn default() -> Self {
        SelectionProtocol {
            kind: SelectionKind::TrainingDomainValidation,
            validation_fraction: 0.2,
        }
    }
}

impl SelectionProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(HaroodError::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// The combo picked for one trial and the target accuracy it reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialChoice {
    pub seed: u64,
    pub combo: String,
    pub val_acc: f64,
    pub target_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub task: String,
    pub kind: SelectionKind,
    /// Most frequently chosen combo across trials.
    pub combo: String,
    /// Mean target accuracy over trials.
    pub accuracy: f64,
    /// Standard error of the mean over trials; 0 for a single trial.
    pub stderr: f64,
    pub trials: Vec<TrialChoice>,
}

fn single_task(records: &[RunRecord]) -> Result<&str> {
    let first = records
        .first()
        .ok_or_else(|| HaroodError::Protocol("no run records to select from".into()))?;
    if let Some(r) = records.iter().find(|r| r.task != first.task || r.algorithm != first.algorithm) {
        return Err(HaroodError::Protocol(format!(
            "selection mixes {}/{} with {}/{}",
            first.algorithm, first.task, r.algorithm, r.task
        )));
    }
    Ok(&first.task)
}

fn by_trial(records: &[RunRecord]) -> BTreeMap<u64, Vec<&RunRecord>> {
    let mut m: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.seed).or_default().push(r);
    }
    m
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Lower learning rate first, then smaller batch.
fn tie_order(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    a.lr.total_cmp(&b.lr).then(a.batch_size.cmp(&b.batch_size))
}

fn summarize(task: &str, kind: SelectionKind, trials: Vec<TrialChoice>, records: &[RunRecord]) -> Selection {
    let accs: Vec<f64> = trials.iter().map(|t| t.target_acc).collect();
    let (accuracy, stderr) = mean_and_stderr(&accs);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &trials {
        *counts.entry(t.combo.as_str()).or_default() += 1;
    }
    let rep = |c: &str| records.iter().find(|r| r.combo == c).expect("combo comes from records");
    let combo = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| tie_order(rep(b.0), rep(a.0))))
        .map(|(c, _)| c.to_string())
        .unwrap_or_default();
    Selection {
        task: task.to_string(),
        kind,
        combo,
        accuracy,
        stderr,
        trials,
    }
}

/// Per trial, the combo with the highest validation accuracy; its
/// best-validation-epoch target accuracy is reported.
pub fn select_by_validation(records: &[RunRecord]) -> Result<Selection> {
    let task = single_task(records)?;
    let trials = by_trial(records)
        .into_iter()
        .map(|(seed, rs)| {
            let best = rs
                .into_iter()
                .max_by(|a, b| {
                    a.final_metrics
                        .val_acc
                        .total_cmp(&b.final_metrics.val_acc)
                        .then_with(|| tie_order(b, a))
                })
                .expect("trial groups are non-empty");
            TrialChoice {
                seed,
                combo: best.combo.clone(),
                val_acc: best.final_metrics.val_acc,
                target_acc: best.final_metrics.target_acc,
            }
        })
        .collect();
    Ok(summarize(task, SelectionKind::TrainingDomainValidation, trials, records))
}

/// Per trial, the best target accuracy over every combo and epoch.
pub fn select_by_oracle(records: &[RunRecord]) -> Result<Selection> {
    let task = single_task(records)?;
    let trials = by_trial(records)
        .into_iter()
        .map(|(seed, rs)| {
            let best = rs
                .into_iter()
                .max_by(|a, b| {
                    a.best_target_acc()
                        .total_cmp(&b.best_target_acc())
                        .then_with(|| tie_order(b, a))
                })
                .expect("trial groups are non-empty");
            TrialChoice {
                seed,
                combo: best.combo.clone(),
                val_acc: best.final_metrics.val_acc,
                target_acc: best.best_target_acc(),
            }
        })
        .collect();
    Ok(summarize(task, SelectionKind::Oracle, trials, records))
}

/// The combo with the highest validation accuracy averaged over trials,
/// reporting that combo's target accuracy in every trial.
pub fn select_by_mean_validation(records: &[RunRecord]) -> Result<Selection> {
    let task = single_task(records)?;
    let mut combos: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        combos.entry(r.combo.as_str()).or_default().push(r);
    }
    let mean_val = |rs: &[&RunRecord]| rs.iter().map(|r| r.final_metrics.val_acc).sum::<f64>() / rs.len() as f64;
    let (_, chosen) = combos
        .into_iter()
        .max_by(|a, b| mean_val(&a.1).total_cmp(&mean_val(&b.1)).then_with(|| tie_order(b.1[0], a.1[0])))
        .expect("records are non-empty");
    let mut trials: Vec<TrialChoice> = chosen
        .iter()
        .map(|r| TrialChoice {
            seed: r.seed,
            combo: r.combo.clone(),
            val_acc: r.final_metrics.val_acc,
            target_acc: r.final_metrics.target_acc,
        })
        .collect();
    trials.sort_by_key(|t| t.seed);
    Ok(summarize(task, SelectionKind::TrainingDomainValidation, trials, records))
}

/// One selection per task, tasks in first-seen order.
pub fn select(records: &[RunRecord], kind: SelectionKind) -> Result<Vec<Selection>> {
    if records.is_empty() {
        return Err(HaroodError::Protocol("no run records to select from".into()));
    }
    let mut tasks: Vec<&str> = Vec::new();
    for r in records {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    tasks
        .into_iter()
        .map(|t| {
            let rs: Vec<RunRecord> = records.iter().filter(|r| r.task == t).cloned().collect();
            match kind {
                SelectionKind::TrainingDomainValidation => select_by_validation(&rs),
                SelectionKind::Oracle => select_by_oracle(&rs),
            }
        })
        .collect()
}

/// Rank 1 for the largest value; tied values share the mean of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub tasks: Vec<String>,
    /// `accuracy[method][task]`.
    pub accuracy: Vec<Vec<f64>>,
    pub ranks: Vec<Vec<f64>>,
    pub rank_sums: Vec<f64>,
    /// Methods by ascending rank sum, ties by input order.
    pub order: Vec<String>,
}

pub fn aggregate_ranks(methods: Vec<String>, tasks: Vec<String>, accuracy: Vec<Vec<f64>>) -> Result<RankTable> {
    if methods.is_empty() || tasks.is_empty() {
        return Err(HaroodError::Protocol("rank table needs at least one method and one task".into()));
    }
    if accuracy.len() != methods.len() || accuracy.iter().any(|row| row.len() != tasks.len()) {
        return Err(HaroodError::Shape(format!(
            "accuracy table must be {}×{}",
            methods.len(),
            tasks.len()
        )));
    }
    let mut ranks = vec![vec![0.0; tasks.len()]; methods.len()];
    for t in 0..tasks.len() {
        let column: Vec<f64> = accuracy.iter().map(|row| row[t]).collect();
        for (m, r) in fractional_ranks(&column).into_iter().enumerate() {
            ranks[m][t] = r;
        }
    }
    let rank_sums: Vec<f64> = ranks.iter().map(|r| r.iter().sum()).collect();
    let mut idx: Vec<usize> = (0..methods.len()).collect();
    idx.sort_by(|&a, &b| rank_sums[a].total_cmp(&rank_sums[b]).then(a.cmp(&b)));
    let order = idx.iter().map(|&i| methods[i].clone()).collect();
    Ok(RankTable {
        methods,
        tasks,
        accuracy,
        ranks,
        rank_sums,
        order,
    })
}
