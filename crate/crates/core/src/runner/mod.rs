//! Config-driven experiments: data loading, grid execution, persistence and reports.

pub mod config;
pub mod report;
pub mod store;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{parse_config, parse_overrides, ConfigSource, GridConfig, RunConfig};
pub use report::{emit_report, ReportFiles};
pub use store::{persist_results, ResultsStore, RunKey, StoreIndex};

use crate::algorithms::algorithm_info;
use crate::data::cache::{cached_subjects, ingest, write_atomic};
use crate::data::mock::mock_recordings;
use crate::data::registry::DatasetId;
use crate::data::synthetic::make_synthetic_suite;
use crate::data::DomainDataset;
use crate::error::{HaroodError, Result};
use crate::eval::protocol::train_run_with_model;
use crate::eval::{
    grid_jobs, mean_and_stderr, select_by_mean_validation, select_by_oracle, select_by_validation, train_run,
    GridSpec, Job, RunRecord, Selection, SelectionKind, EVAL_BATCH,
};
use crate::scenario::bundle_io::load_bundle;
use crate::scenario::{
    build_scenario, CacheDir, InMemory, RecordingSource, ScenarioBundle, ScenarioKind, ScenarioSpec,
};

/// Domains ready for training plus the labels used in records and paths.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub scenario: String,
    pub dataset: String,
    pub domains: Vec<DomainDataset>,
}

impl LoadedData {
    pub fn shape(&self) -> [usize; 3] {
        self.domains[0].shape()
    }
}

/// The default specification of a scenario id and dataset name; the dataset
/// is ignored for the cross-dataset scenario.
pub fn scenario_spec(task: &str, dataset: &str, window_length: Option<usize>) -> Result<ScenarioSpec> {
    let kind = ScenarioKind::parse(task)?;
    let spec = if kind == ScenarioKind::CrossDataset {
        ScenarioSpec::cross_dataset_default()?
    } else {
        ScenarioSpec::default_for(kind, DatasetId::parse(dataset)?)?
    };
    match window_length {
        Some(w) => spec.with_window_length(w),
        None => Ok(spec),
    }
}

fn ensure_cache(cfg: &RunConfig, datasets: &[DatasetId]) -> Result<()> {
    for &ds in datasets {
        let cached = cached_subjects(&cfg.cache_dir, ds).map(|s| !s.is_empty()).unwrap_or(false);
        if cached {
            continue;
        }
        let Some(root) = &cfg.data_root else {
            return Err(HaroodError::ingestion(
                cfg.cache_dir.join(ds.name()),
                "no cached recordings and no data_root to ingest from",
            ));
        };
        let per_dataset = root.join(ds.name());
        let src = if per_dataset.is_dir() { per_dataset } else { root.clone() };
        log::info!("ingesting {} from {}", ds.name(), src.display());
        ingest(ds.name(), &src, &cfg.cache_dir)?;
    }
    Ok(())
}

/// Synthetic suite, saved bundle, mock recordings or the ingestion cache, in that order.
pub fn load_domains(cfg: &RunConfig) -> Result<LoadedData> {
    if let Some(syn) = &cfg.synthetic {
        return Ok(LoadedData {
            scenario: "synthetic".into(),
            dataset: "synthetic".into(),
            domains: make_synthetic_suite(syn)?,
        });
    }
    if let Some(dir) = &cfg.bundle {
        let b = load_bundle(dir)?;
        let datasets: Vec<&str> = b.spec.datasets.iter().map(|d| d.name()).collect();
        return Ok(LoadedData {
            scenario: b.spec.scenario.name().into(),
            dataset: datasets.join("+"),
            domains: b.domains,
        });
    }
    let bundle = build_bundle(cfg)?;
    let datasets: Vec<&str> = bundle.spec.datasets.iter().map(|d| d.name()).collect();
    Ok(LoadedData {
        scenario: bundle.spec.scenario.name().into(),
        dataset: datasets.join("+"),
        domains: bundle.domains,
    })
}

/// Builds the configured scenario from mock recordings or the ingestion cache.
pub fn build_bundle(cfg: &RunConfig) -> Result<ScenarioBundle> {
    let spec = scenario_spec(&cfg.task, &cfg.dataset, cfg.window_length)?;
    let source: Box<dyn RecordingSource> = match cfg.mock_windows {
        Some(n) => {
            let mut m = HashMap::new();
            for &ds in &spec.datasets {
                m.insert(ds, mock_recordings(ds, n, cfg.seed)?);
            }
            Box::new(InMemory(m))
        }
        None => {
            ensure_cache(cfg, &spec.datasets)?;
            Box::new(CacheDir(cfg.cache_dir.clone()))
        }
    };
    build_scenario(source.as_ref(), &spec)
}

pub fn grid_spec(cfg: &RunConfig, data: &LoadedData) -> Result<GridSpec> {
    let algorithm = algorithm_info(&cfg.algorithm)?.name;
    let mut spec = GridSpec::new(algorithm, cfg.backbone_settings(data.shape())?, cfg.hyper_grid()?);
    spec.algorithm_config = cfg.algorithm_settings()?;
    spec.trials = cfg.trials;
    spec.max_epoch = cfg.max_epoch;
    spec.seed = cfg.seed;
    spec.validation_fraction = cfg.validation_fraction;
    spec.test_envs = cfg.test_envs.clone();
    spec.deterministic = cfg.deterministic_mode();
    spec.timing_repetitions = cfg.timing_repetitions;
    spec.scenario = data.scenario.clone();
    spec.dataset = data.dataset.clone();
    Ok(spec)
}

fn job_key(spec: &GridSpec, job: &Job) -> RunKey {
    RunKey {
        scenario: spec.scenario.clone(),
        dataset: spec.dataset.clone(),
        algorithm: spec.algorithm.clone(),
        backbone: spec.backbone.family.to_string(),
        combo: job.combo.id(),
        target: job.task.target_domain,
        seed: job.seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub protocol: SelectionKind,
    pub combo: String,
    pub accuracy: f64,
    pub stderr: f64,
    pub macro_f1: f64,
    pub validation_accuracy: f64,
    pub mean_validation_accuracy: f64,
    pub oracle_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub dataset: String,
    pub algorithm: String,
    pub backbone: String,
    pub protocol: SelectionKind,
    pub tasks: Vec<TaskSummary>,
    pub mean_accuracy: f64,
    pub records: usize,
    pub diverged: usize,
    /// False when the run limit stopped execution before every job finished.
    pub complete: bool,
    /// Run files relative to the output root.
    pub files: Vec<String>,
}

/// Limits for partial execution.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Stop after this many new runs; completed runs already in the store do not count.
    pub max_new_runs: Option<usize>,
}

fn mean_f1(sel: &Selection, records: &[&RunRecord]) -> f64 {
    let f1: Vec<f64> = sel
        .trials
        .iter()
        .filter_map(|t| records.iter().find(|r| r.seed == t.seed && r.combo == t.combo))
        .map(|r| r.final_metrics.macro_f1)
        .collect();
    mean_and_stderr(&f1).0
}

pub fn summarize(records: &[RunRecord], protocol: SelectionKind) -> Result<Vec<TaskSummary>> {
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
            let refs: Vec<&RunRecord> = rs.iter().collect();
            let valid = select_by_validation(&rs)?;
            let oracle = select_by_oracle(&rs)?;
            let mean_valid = select_by_mean_validation(&rs)?;
            let chosen = match protocol {
                SelectionKind::TrainingDomainValidation => &valid,
                SelectionKind::Oracle => &oracle,
            };
            Ok(TaskSummary {
                task: t.to_string(),
                protocol,
                combo: chosen.combo.clone(),
                accuracy: chosen.accuracy,
                stderr: chosen.stderr,
                macro_f1: mean_f1(chosen, &refs),
                validation_accuracy: valid.accuracy,
                mean_validation_accuracy: mean_valid.accuracy,
                oracle_accuracy: oracle.accuracy,
            })
        })
        .collect()
}

fn dump_features(path: &Path, run: &crate::eval::protocol::TrainedRun, data: &LoadedData) -> Result<()> {
    let windows = data.domains[run.record.target_domain].windows();
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_report = |e: csv::Error| HaroodError::Report(e.to_string());
    let mut header_written = false;
    for chunk in windows.chunks(EVAL_BATCH) {
        let (x, labels) = crate::data::stack_windows(chunk);
        let f = run.model.forward_features_with(&run.best_params, &x)?;
        let dim = f.shape()[1];
        if !header_written {
            let mut h = vec!["label".to_string()];
            h.extend((0..dim).map(|k| format!("f{k}")));
            w.write_record(&h).map_err(to_report)?;
            header_written = true;
        }
        for (i, y) in labels.iter().enumerate() {
            let mut row = vec![y.to_string()];
            row.extend(f.data()[i * dim..(i + 1) * dim].iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(to_report)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| HaroodError::Report(e.to_string()))?;
    write_atomic(path, &bytes)
}

fn execute(
    data: &LoadedData,
    spec: &GridSpec,
    store: &ResultsStore,
    job: &Job,
    features: bool,
) -> Result<RunRecord> {
    let context = || format!("{} {} {} seed {}", spec.algorithm, job.task.id(), job.combo.id(), job.seed);
    let record = if features {
        let run = train_run_with_model(&data.domains, spec, job).map_err(|e| e.context(context()))?;
        let path = store.persist(&run.record)?;
        dump_features(&path.with_extension("features.csv"), &run, data)?;
        run.record
    } else {
        let record = train_run(&data.domains, spec, job).map_err(|e| e.context(context()))?;
        store.persist(&record)?;
        record
    };
    log::info!(
        "{} {} {} seed {}: target acc {:.4}",
        spec.algorithm,
        record.task,
        record.combo,
        record.seed,
        record.final_metrics.target_acc
    );
    Ok(record)
}

fn run_pending(
    data: &LoadedData,
    spec: &GridSpec,
    store: &ResultsStore,
    pending: &[&Job],
    features: bool,
    workers: usize,
) -> Result<Vec<RunRecord>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HaroodError::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| {
            pending
                .par_iter()
                .map(|job| execute(data, spec, store, job, features))
                .collect()
        })
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        pending.iter().map(|job| execute(data, spec, store, job, features)).collect()
    }
}

pub fn summary_path(store: &ResultsStore, spec: &GridSpec) -> PathBuf {
    store
        .group_dir(&[&spec.scenario, &spec.dataset, &spec.algorithm, &spec.backbone.family.to_string()])
        .join("summary.json")
}

pub fn train_entry(cfg: &RunConfig) -> Result<RunSummary> {
    train_entry_with(cfg, RunOptions::default())
}

/// Runs every pending job of the configured grid, reusing completed runs
/// already in the store, then selects and summarizes.
pub fn train_entry_with(cfg: &RunConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_domains(cfg)?;
    let spec = grid_spec(cfg, &data)?;
    let jobs = grid_jobs(data.domains.len(), &spec)?;
    let store = ResultsStore::open(&cfg.output)?;

    let mut existing: Vec<Option<RunRecord>> = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let rec = match store.latest(&job_key(&spec, job)) {
            Some((p, _)) => Some(ResultsStore::load(&p)?),
            None => None,
        };
        existing.push(rec);
    }
    let mut pending: Vec<&Job> = jobs.iter().zip(&existing).filter(|(_, e)| e.is_none()).map(|(j, _)| j).collect();
    if !pending.is_empty() && pending.len() < jobs.len() {
        log::info!("resuming: {} of {} runs already stored", jobs.len() - pending.len(), jobs.len());
    }
    let complete = opts.max_new_runs.is_none_or(|k| k >= pending.len());
    if let Some(k) = opts.max_new_runs {
        pending.truncate(k);
    }
    let fresh = run_pending(&data, &spec, &store, &pending, cfg.dump_features, cfg.worker_count())?;
    let mut fresh = fresh.into_iter();
    let mut records = Vec::with_capacity(jobs.len());
    let mut files = Vec::with_capacity(jobs.len());
    for (job, prior) in jobs.iter().zip(existing) {
        let rec = match prior {
            Some(r) => r,
            None if pending.iter().any(|p| std::ptr::eq(*p, job)) => fresh.next().expect("one record per pending job"),
            None => continue,
        };
        let (path, _) = store.latest(&job_key(&spec, job)).expect("record was persisted");
        files.push(
            path.strip_prefix(store.root())
                .unwrap_or(&path)
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
        );
        records.push(rec);
    }
    store.rebuild_index()?;

    let tasks = if complete { summarize(&records, cfg.protocol)? } else { Vec::new() };
    let summary = RunSummary {
        scenario: spec.scenario.clone(),
        dataset: spec.dataset.clone(),
        algorithm: spec.algorithm.clone(),
        backbone: spec.backbone.family.to_string(),
        protocol: cfg.protocol,
        mean_accuracy: if tasks.is_empty() {
            0.0
        } else {
            mean_and_stderr(&tasks.iter().map(|t| t.accuracy).collect::<Vec<_>>()).0
        },
        tasks,
        records: records.len(),
        diverged: records.iter().filter(|r| r.diverged).count(),
        complete,
        files,
    };
    if complete {
        write_atomic(
            &summary_path(&store, &spec),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
    }
    Ok(summary)
}
