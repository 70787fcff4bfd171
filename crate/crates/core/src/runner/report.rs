//! Report files derived from a results store. Everything is data (CSV, JSON, Markdown); no plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::store::ResultsStore;
use crate::data::cache::write_atomic;
use crate::error::{HaroodError, Result};
use crate::eval::{aggregate_ranks, mean_and_stderr, select, ConfusionMatrix, RunRecord, Selection, SelectionKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Records sharing scenario, dataset and backbone.
type Setting = (String, String, String);

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let to_err = |e: csv::Error| HaroodError::Report(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| HaroodError::Report(e.to_string()))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn confusion_csv(cm: &ConfusionMatrix) -> Result<Vec<u8>> {
    let c = cm.counts.len();
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..c).map(|k| k.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = cm
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| std::iter::once(i.to_string()).chain(row.iter().map(|v| v.to_string())).collect())
        .collect();
    csv_bytes(&header, &rows)
}

fn summed_confusion(sel: &Selection, records: &[RunRecord]) -> Option<ConfusionMatrix> {
    let mut total: Option<ConfusionMatrix> = None;
    for t in &sel.trials {
        let r = records.iter().find(|r| r.seed == t.seed && r.combo == t.combo)?;
        match &mut total {
            None => total = Some(r.confusion.clone()),
            Some(acc) => {
                for (a, b) in acc.counts.iter_mut().zip(&r.confusion.counts) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    total
}

/// Accuracy table, rank table, confusion matrices, timing and a Markdown
/// overview under `out_dir` (default `<store>/report/<protocol>`).
pub fn emit_report(store: &ResultsStore, protocol: SelectionKind, out_dir: Option<&Path>) -> Result<ReportFiles> {
    let records = store.load_latest()?;
    if records.is_empty() {
        return Err(HaroodError::Report(format!("no run records under {}", store.root().display())));
    }
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| store.root().join("report").join(protocol.name()));
    let mut grouped: BTreeMap<Setting, BTreeMap<String, Vec<RunRecord>>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.scenario.clone(), r.dataset.clone(), r.backbone.clone()))
            .or_default()
            .entry(r.algorithm.clone())
            .or_default()
            .push(r);
    }

    let mut files = Vec::new();
    let mut write = |rel: PathBuf, bytes: &[u8]| -> Result<()> {
        let p = dir.join(&rel);
        write_atomic(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    let mut acc_rows = Vec::new();
    let mut rank_rows = Vec::new();
    let mut rank_sum_rows = Vec::new();
    let mut timing_rows = Vec::new();
    let mut md = format!("# Benchmark report\n\nModel selection: {}\n", protocol.name());

    for ((scenario, dataset, backbone), by_alg) in &grouped {
        let setting = [scenario.clone(), dataset.clone(), backbone.clone()];
        let mut selections: BTreeMap<&str, Vec<Selection>> = BTreeMap::new();
        for (alg, rs) in by_alg {
            let sels = select(rs, protocol)?;
            for s in &sels {
                let mut row = setting.to_vec();
                row.extend([
                    alg.clone(),
                    s.task.clone(),
                    protocol.name().into(),
                    fmt(s.accuracy),
                    fmt(s.stderr),
                    s.trials.len().to_string(),
                    s.combo.clone(),
                ]);
                acc_rows.push(row);
                if let Some(cm) = summed_confusion(s, rs) {
                    let rel = PathBuf::from("confusion")
                        .join(format!("{scenario}_{dataset}_{backbone}"))
                        .join(alg)
                        .join(format!("{}.csv", s.task));
                    write(rel, &confusion_csv(&cm)?)?;
                }
            }
            let means: Vec<f64> = sels.iter().map(|s| s.accuracy).collect();
            let mut row = setting.to_vec();
            row.extend([
                alg.clone(),
                "avg".into(),
                protocol.name().into(),
                fmt(mean_and_stderr(&means).0),
                String::new(),
                String::new(),
                String::new(),
            ]);
            acc_rows.push(row);

            let secs: Vec<f64> = rs.iter().map(|r| r.final_metrics.seconds).collect();
            let inf: Vec<f64> = rs.iter().filter_map(|r| r.final_metrics.inference_seconds).collect();
            let mut row = setting.to_vec();
            row.extend([
                alg.clone(),
                rs.len().to_string(),
                fmt(mean_and_stderr(&secs).0),
                if inf.is_empty() { String::new() } else { fmt(mean_and_stderr(&inf).0) },
            ]);
            timing_rows.push(row);
            selections.insert(alg, sels);
        }

        let mut tasks: Vec<String> = Vec::new();
        for sels in selections.values() {
            for s in sels {
                if !tasks.contains(&s.task) {
                    tasks.push(s.task.clone());
                }
            }
        }
        tasks.retain(|t| selections.values().all(|sels| sels.iter().any(|s| &s.task == t)));
        tasks.sort_by_key(|t| (t.len(), t.clone()));
        let _ = writeln!(md, "\n## {scenario} / {dataset} / {backbone}\n");
        if tasks.is_empty() {
            let _ = writeln!(md, "No task is shared by every algorithm; ranks omitted.");
            continue;
        }
        let methods: Vec<String> = selections.keys().map(|s| s.to_string()).collect();
        let accuracy: Vec<Vec<f64>> = selections
            .values()
            .map(|sels| {
                tasks
                    .iter()
                    .map(|t| sels.iter().find(|s| &s.task == t).expect("shared task").accuracy)
                    .collect()
            })
            .collect();
        let table = aggregate_ranks(methods, tasks.clone(), accuracy)?;
        for (m, name) in table.methods.iter().enumerate() {
            for (t, task) in table.tasks.iter().enumerate() {
                let mut row = setting.to_vec();
                row.extend([
                    name.clone(),
                    task.clone(),
                    fmt(table.accuracy[m][t]),
                    table.ranks[m][t].to_string(),
                ]);
                rank_rows.push(row);
            }
        }
        for (pos, name) in table.order.iter().enumerate() {
            let m = table.methods.iter().position(|x| x == name).expect("ordered method exists");
            let mut row = setting.to_vec();
            row.extend([(pos + 1).to_string(), name.clone(), table.rank_sums[m].to_string()]);
            rank_sum_rows.push(row);
        }

        let _ = write!(md, "| algorithm |");
        for t in &table.tasks {
            let _ = write!(md, " {t} |");
        }
        let _ = writeln!(md, " avg | rank sum |");
        let _ = writeln!(md, "|---|{}---|---|", "---|".repeat(table.tasks.len()));
        for name in &table.order {
            let m = table.methods.iter().position(|x| x == name).expect("ordered method exists");
            let sels = &selections[name.as_str()];
            let _ = write!(md, "| {name} |");
            for t in &table.tasks {
                let s = sels.iter().find(|s| &s.task == t).expect("shared task");
                let _ = write!(md, " {:.2} ± {:.2} |", 100.0 * s.accuracy, 100.0 * s.stderr);
            }
            let avg = table.accuracy[m].iter().sum::<f64>() / table.tasks.len() as f64;
            let _ = writeln!(md, " {:.2} | {} |", 100.0 * avg, table.rank_sums[m]);
        }
    }

    let setting_cols = ["scenario", "dataset", "backbone"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> { setting_cols.iter().chain(extra).copied().collect() };
    write(
        "accuracy.csv".into(),
        &csv_bytes(
            &with(&["algorithm", "task", "protocol", "mean", "stderr", "trials", "combo"]),
            &acc_rows,
        )?,
    )?;
    write("ranks.csv".into(), &csv_bytes(&with(&["algorithm", "task", "accuracy", "rank"]), &rank_rows)?)?;
    write(
        "rank_sums.csv".into(),
        &csv_bytes(&with(&["position", "algorithm", "rank_sum"]), &rank_sum_rows)?,
    )?;
    write(
        "timing.csv".into(),
        &csv_bytes(
            &with(&["algorithm", "runs", "mean_train_seconds", "mean_inference_seconds"]),
            &timing_rows,
        )?,
    )?;

    let dumps: Vec<String> = walkdir::WalkDir::new(store.root())
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".features.csv"))
        .map(|e| e.path().strip_prefix(store.root()).unwrap_or(e.path()).display().to_string())
        .collect();
    if !dumps.is_empty() {
        let _ = writeln!(md, "\n## Feature dumps\n");
        for d in &dumps {
            let _ = writeln!(md, "- {d}");
        }
    }
    write("report.md".into(), md.as_bytes())?;
    Ok(ReportFiles { dir, files })
}
