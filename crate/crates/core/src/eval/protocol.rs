//! Training runs over leave-one-domain-out tasks and hyperparameter grids.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, evaluate_accuracy, split_train_valid, ConfusionMatrix, EvalResult};
use crate::algorithms::{create_algorithm, AlgorithmConfig, DomainBatch, StepContext};
use crate::data::{DomainDataset, SensorWindow};
use crate::error::{HaroodError, Result};
use crate::nn::backbone::{BackboneConfig, ModelBundle};
use crate::nn::optim::Adam;
use crate::nn::params::ParamStore;
use crate::scenario::{lodo_tasks, LodoTask};

pub const DEFAULT_LRS: [f64; 5] = [0.001, 0.005, 0.01, 0.05, 0.1];
pub const DEFAULT_BATCH_SIZES: [usize; 4] = [32, 64, 128, 256];
pub const DEFAULT_MAX_EPOCH: usize = 150;
pub const DEFAULT_TRIALS: usize = 3;
/// Training accuracy is estimated on at most this many training windows.
pub const TRAIN_EVAL_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
}

impl HyperParams {
    pub fn id(&self) -> String {
        format!("lr{}_bs{}", self.lr, self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(HaroodError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(HaroodError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub combos: Vec<HyperParams>,
}

impl Grid {
    /// Learning rate × batch size, learning rate outermost.
    pub fn product(lrs: &[f64], batch_sizes: &[usize]) -> Result<Self> {
        let combos: Vec<HyperParams> = lrs
            .iter()
            .flat_map(|&lr| batch_sizes.iter().map(move |&batch_size| HyperParams { lr, batch_size }))
            .collect();
        let grid = Grid { combos };
        grid.validate()?;
        Ok(grid)
    }

    pub fn default_grid() -> Self {
        Self::product(&DEFAULT_LRS, &DEFAULT_BATCH_SIZES).expect("default grid is valid")
    }

    pub fn single(hp: HyperParams) -> Self {
        Grid { combos: vec![hp] }
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.combos.is_empty() {
            return Err(HaroodError::Config("hyperparameter grid is empty".into()));
        }
        self.combos.iter().try_for_each(HyperParams::validate)
    }
}

/// Everything that is fixed across the runs of one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub algorithm: String,
    pub algorithm_config: AlgorithmConfig,
    pub backbone: BackboneConfig,
    pub grid: Grid,
    pub trials: usize,
    pub max_epoch: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Held-out domains to run; all when `None`.
    pub test_envs: Option<Vec<usize>>,
    /// Record zero wall-clock time so repeated runs serialize identically.
    pub deterministic: bool,
    /// Forward passes over the target set timed after training; 0 disables.
    pub timing_repetitions: usize,
    pub scenario: String,
    pub dataset: String,
}

impl GridSpec {
    pub fn new(algorithm: &str, backbone: BackboneConfig, grid: Grid) -> Self {
        GridSpec {
            algorithm: algorithm.to_string(),
            algorithm_config: AlgorithmConfig::named(algorithm),
            backbone,
            grid,
            trials: DEFAULT_TRIALS,
            max_epoch: DEFAULT_MAX_EPOCH,
            seed: 0,
            validation_fraction: 0.2,
            test_envs: None,
            deterministic: false,
            timing_repetitions: 0,
            scenario: String::new(),
            dataset: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.trials == 0 {
            return Err(HaroodError::Config("trials must be at least 1".into()));
        }
        if self.max_epoch == 0 {
            return Err(HaroodError::Config("max_epoch must be at least 1".into()));
        }
        self.algorithm_config.validate()?;
        self.backbone.validate()
    }
}

/// One (task, combo, trial) cell of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub task: LodoTask,
    pub combo_index: usize,
    pub combo: HyperParams,
    pub trial: usize,
    pub seed: u64,
}

/// SplitMix64 over `base` and `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub fn grid_jobs(domain_count: usize, spec: &GridSpec) -> Result<Vec<Job>> {
    spec.validate()?;
    let mut tasks = lodo_tasks(domain_count)?;
    if let Some(envs) = &spec.test_envs {
        if let Some(&bad) = envs.iter().find(|&&e| e >= domain_count) {
            return Err(HaroodError::Config(format!(
                "test env {bad} outside 0..{domain_count}"
            )));
        }
        tasks.retain(|t| envs.contains(&t.target_domain));
    }
    let mut jobs = Vec::with_capacity(tasks.len() * spec.grid.len() * spec.trials);
    for task in &tasks {
        for (ci, &combo) in spec.grid.combos.iter().enumerate() {
            for trial in 0..spec.trials {
                jobs.push(Job {
                    task: task.clone(),
                    combo_index: ci,
                    combo,
                    trial,
                    seed: spec.seed + trial as u64,
                });
            }
        }
    }
    Ok(jobs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub target_acc: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Epoch of the best validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub val_acc: f64,
    pub target_acc: f64,
    pub macro_f1: f64,
    pub seconds: f64,
    #[serde(default)]
    pub inference_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub target_domain: usize,
    pub algorithm: String,
    pub combo: String,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub trial: usize,
    pub backbone: String,
    pub scenario: String,
    pub dataset: String,
    pub epoch_metrics: Vec<EpochMetrics>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    /// Target-domain confusion at the best-validation epoch.
    pub confusion: ConfusionMatrix,
    pub diverged: bool,
    #[serde(default)]
    pub divergence: Option<String>,
}

impl RunRecord {
    /// Best target accuracy over all recorded epochs.
    pub fn best_target_acc(&self) -> f64 {
        self.epoch_metrics
            .iter()
            .map(|e| e.target_acc)
            .fold(self.final_metrics.target_acc, f64::max)
    }
}

/// Cycles through a domain in reshuffled passes.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Sampler { order, pos: 0 }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = k.min(self.order.len());
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// A finished run plus the parameters of its best-validation epoch.
pub struct TrainedRun {
    pub record: RunRecord,
    pub model: ModelBundle,
    pub best_params: ParamStore,
}

pub fn train_run(domains: &[DomainDataset], spec: &GridSpec, job: &Job) -> Result<RunRecord> {
    train_run_with_model(domains, spec, job).map(|r| r.record)
}

pub fn train_run_with_model(domains: &[DomainDataset], spec: &GridSpec, job: &Job) -> Result<TrainedRun> {
    let start = Instant::now();
    let target = job.task.target_domain;
    let class_count = domains
        .first()
        .ok_or_else(|| HaroodError::Protocol("no domains".into()))?
        .class_count;
    let sources: Vec<DomainDataset> = job.task.source_domains.iter().map(|&d| domains[d].clone()).collect();
    let split_seed = derive_seed(job.seed, &[target as u64, 1]);
    let tv = split_train_valid(&sources, spec.validation_fraction, split_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(job.seed, &[target as u64, job.combo_index as u64, 2]));

    let mut alg = create_algorithm(&spec.algorithm, &spec.algorithm_config)?;
    let model = ModelBundle::new(spec.backbone.clone(), class_count, &mut rng)?;
    let mut model = alg.prepare(model, tv.train.len(), &mut rng)?;
    let mut opt = Adam::new(spec.algorithm_config.weight_decay);

    let bs = job.combo.batch_size;
    let max_n = tv.train.iter().map(DomainDataset::len).max().unwrap_or(0);
    let steps_per_epoch = max_n.div_ceil(bs).max(1);
    let total_steps = steps_per_epoch * spec.max_epoch;
    let mut samplers: Vec<Sampler> = tv.train.iter().map(|d| Sampler::new(d.len(), &mut rng)).collect();

    let mut train_probe: Vec<SensorWindow> = tv.train.iter().flat_map(|d| d.windows().iter().cloned()).collect();
    train_probe.shuffle(&mut rng);
    train_probe.truncate(TRAIN_EVAL_CAP);
    if tv.valid.is_empty() {
        log::warn!("validation split is empty; validation accuracy falls back to training accuracy");
    }
    let target_windows = domains[target].windows();

    let mut epochs = Vec::with_capacity(spec.max_epoch);
    let mut best: Option<(usize, f64, EvalResult)> = None;
    let mut best_params = model.params.clone();
    let mut divergence = None;
    'outer: for epoch in 0..spec.max_epoch {
        let mut loss_sum = 0.0;
        for s in 0..steps_per_epoch {
            let batches = tv
                .train
                .iter()
                .zip(samplers.iter_mut())
                .map(|(d, sm)| {
                    let idx = sm.next(bs, &mut rng);
                    let (inputs, labels) = d.batch(&idx);
                    DomainBatch::new(inputs, labels, d.domain_id)
                })
                .collect::<Result<Vec<_>>>()?;
            let ctx = StepContext::new(job.combo.lr, epoch * steps_per_epoch + s, total_steps);
            match alg.update(&mut model, &mut opt, &batches, &ctx, &mut rng) {
                Ok(r) => loss_sum += r.total_loss,
                Err(HaroodError::Divergence(r)) => {
                    log::warn!(
                        "{} {} {}: diverged at step {}",
                        spec.algorithm,
                        job.task.id(),
                        job.combo.id(),
                        r.step_index
                    );
                    divergence = Some(format!("non-finite loss at step {}", r.step_index));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        let params = alg.eval_params(&model);
        let train_acc = evaluate_accuracy(&model, params, &train_probe)?;
        let val_acc = if tv.valid.is_empty() {
            train_acc
        } else {
            evaluate_accuracy(&model, params, &tv.valid)?
        };
        let tgt = evaluate(&model, params, target_windows)?;
        epochs.push(EpochMetrics {
            epoch,
            train_acc,
            val_acc,
            target_acc: tgt.accuracy,
            mean_loss: loss_sum / steps_per_epoch as f64,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_acc > *v) {
            best_params = params.clone();
            best = Some((epoch, val_acc, tgt));
        }
    }

    let (best_epoch, val_acc, tgt) = match best {
        Some(b) => b,
        None => (
            0,
            0.0,
            EvalResult {
                accuracy: 0.0,
                macro_f1: 0.0,
                confusion: ConfusionMatrix {
                    counts: vec![vec![0; class_count]; class_count],
                },
            },
        ),
    };
    let inference_seconds = if spec.timing_repetitions > 0 && !epochs.is_empty() {
        Some(super::inference_timing(&model, &best_params, target_windows, spec.timing_repetitions)?)
    } else {
        None
    };
    let seconds = if spec.deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    };
    let record = RunRecord {
        task: job.task.id(),
        target_domain: target,
        algorithm: alg.name().to_string(),
        combo: job.combo.id(),
        lr: job.combo.lr,
        batch_size: bs,
        seed: job.seed,
        trial: job.trial,
        backbone: spec.backbone.family.to_string(),
        scenario: spec.scenario.clone(),
        dataset: spec.dataset.clone(),
        epoch_metrics: epochs,
        final_metrics: FinalMetrics {
            best_epoch,
            val_acc,
            target_acc: tgt.accuracy,
            macro_f1: tgt.macro_f1,
            seconds,
            inference_seconds: inference_seconds.map(|s| if spec.deterministic { 0.0 } else { s }),
        },
        confusion: tgt.confusion,
        diverged: divergence.is_some(),
        divergence,
    };
    Ok(TrainedRun {
        record,
        model,
        best_params,
    })
}

/// Runs every job of the grid; records come back in job order.
pub fn run_grid(domains: &[DomainDataset], spec: &GridSpec) -> Result<Vec<RunRecord>> {
    let jobs = grid_jobs(domains.len(), spec)?;
    let run = |job: &Job| {
        train_run(domains, spec, job).map_err(|e| {
            e.context(format!("{} {} {} seed {}", spec.algorithm, job.task.id(), job.combo.id(), job.seed))
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_twenty_combos() {
        let g = Grid::default_grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g.combos[0], HyperParams { lr: 0.001, batch_size: 32 });
        assert_eq!(g.combos[19], HyperParams { lr: 0.1, batch_size: 256 });
    }

    #[test]
    fn jobs_respect_test_envs() {
        let spec = GridSpec::new("ERM", BackboneConfig::cnn([1, 1, 16]), Grid::default_grid());
        assert_eq!(grid_jobs(4, &spec).unwrap().len(), 240);
        let mut spec = spec;
        spec.test_envs = Some(vec![0]);
        let jobs = grid_jobs(4, &spec).unwrap();
        assert_eq!(jobs.len(), 60);
        assert!(jobs.iter().all(|j| j.task.target_domain == 0));
        spec.test_envs = Some(vec![4]);
        assert!(grid_jobs(4, &spec).is_err());
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_eq!(derive_seed(5, &[2, 3]), derive_seed(5, &[2, 3]));
    }
}
