//! Training algorithms behind one step interface.
//!
//! Every algorithm exposes [`Algorithm::objective`], which evaluates its loss and
//! parameter gradient at a given parameter point, and [`Algorithm::update`], which
//! turns that into one optimizer step. Quantities that are stop-gradient by
//! construction (robust weights, masks, random splits, mixing coefficients) are
//! reported in [`Detached`] and can be fed back to pin them while probing the
//! objective at nearby parameters.

mod align;
mod grad;
mod penalties;
mod risk;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HaroodError, Result};
use crate::nn::backbone::{Features, Mode, ModelBundle};
use crate::nn::graph::{BnRecord, Graph, Var};
use crate::nn::optim::Adam;
use crate::nn::params::{global_norm, ParamStore};
use crate::nn::tensor::Tensor;

pub use align::{augment, Augmentation, Coral, Dann, DdLearn, Lag, Mmd};
pub use grad::{and_mask, fish_meta_step, mldg_objective, rsc_masks, AndMask, Fish, Fishr, Mldg, Rsc};
pub use penalties::{
    coral_penalty, ddlearn_penalty, fishr_penalty, gaussian_kernel_sum, lag_alignment, mmd_penalty,
    urm_penalty, variance_penalty,
};
pub use risk::{debiased, dro_reweight, ema_update, warmup_lr, Erm, ErmPlusPlus, GroupDro, Mixup, Urm, Vrex};

pub const MMD_BANDWIDTHS: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

/// Hyperparameters shared by all algorithms; each algorithm reads the knobs it owns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    pub penalty_weight: f64,
    pub mixup_alpha: f64,
    pub mmd_bandwidths: Vec<f64>,
    /// Divide the bandwidths by the median pairwise squared distance.
    pub mmd_median_heuristic: bool,
    pub dro_eta: f64,
    pub andmask_tau: f64,
    pub vrex_warmup_steps: usize,
    /// Inner step size; the run's learning rate when unset.
    pub mldg_inner_lr: Option<f64>,
    pub mldg_beta: f64,
    pub mldg_second_order: bool,
    pub fish_meta_lr: f64,
    /// Inner step size; the run's learning rate when unset.
    pub fish_inner_lr: Option<f64>,
    pub fishr_ema_decay: f64,
    pub rsc_feature_pct: f64,
    pub rsc_batch_pct: f64,
    pub erm_pp_ema_decay: f64,
    pub erm_pp_warmup_frac: f64,
    pub ddlearn_augmentations: Vec<Augmentation>,
    pub ddlearn_jitter_std: f64,
    pub ddlearn_scale_std: f64,
    pub ddlearn_segments: usize,
    pub lag_align_weight: f64,
    pub lag_branch_fraction: f64,
    pub urm_temperature: f64,
    pub dann_annealing: bool,
    pub weight_decay: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            name: "ERM".into(),
            penalty_weight: 1.0,
            mixup_alpha: 0.2,
            mmd_bandwidths: MMD_BANDWIDTHS.to_vec(),
            mmd_median_heuristic: false,
            dro_eta: 0.01,
            andmask_tau: 1.0,
            vrex_warmup_steps: 0,
            mldg_inner_lr: None,
            mldg_beta: 1.0,
            mldg_second_order: false,
            fish_meta_lr: 0.5,
            fish_inner_lr: None,
            fishr_ema_decay: 0.95,
            rsc_feature_pct: 1.0 / 3.0,
            rsc_batch_pct: 1.0 / 3.0,
            erm_pp_ema_decay: 0.999,
            erm_pp_warmup_frac: 0.05,
            ddlearn_augmentations: vec![
                Augmentation::Jitter,
                Augmentation::Scaling,
                Augmentation::ChannelPermutation,
                Augmentation::TimeSegmentPermutation,
            ],
            ddlearn_jitter_std: 0.05,
            ddlearn_scale_std: 0.1,
            ddlearn_segments: 4,
            lag_align_weight: 1.0,
            lag_branch_fraction: 0.5,
            urm_temperature: 1.0,
            dann_annealing: false,
            weight_decay: crate::nn::optim::DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl AlgorithmConfig {
    pub fn named(name: &str) -> Self {
        AlgorithmConfig {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| HaroodError::Config(format!("{what} = {v} is out of range"));
        let nonneg = [
            ("penalty_weight", self.penalty_weight),
            ("dro_eta", self.dro_eta),
            ("mldg_beta", self.mldg_beta),
            ("fish_meta_lr", self.fish_meta_lr),
            ("ddlearn_jitter_std", self.ddlearn_jitter_std),
            ("ddlearn_scale_std", self.ddlearn_scale_std),
            ("lag_align_weight", self.lag_align_weight),
            ("weight_decay", self.weight_decay),
        ];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(k, v));
            }
        }
        let unit = [
            ("andmask_tau", self.andmask_tau),
            ("fishr_ema_decay", self.fishr_ema_decay),
            ("rsc_feature_pct", self.rsc_feature_pct),
            ("rsc_batch_pct", self.rsc_batch_pct),
            ("erm_pp_ema_decay", self.erm_pp_ema_decay),
            ("erm_pp_warmup_frac", self.erm_pp_warmup_frac),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(k, v));
            }
        }
        for (k, v) in [
            ("mixup_alpha", self.mixup_alpha),
            ("urm_temperature", self.urm_temperature),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(k, v));
            }
        }
        for (k, v) in [("mldg_inner_lr", self.mldg_inner_lr), ("fish_inner_lr", self.fish_inner_lr)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad(k, v));
                }
            }
        }
        if !(self.lag_branch_fraction > 0.0 && self.lag_branch_fraction <= 1.0) {
            return Err(bad("lag_branch_fraction", self.lag_branch_fraction));
        }
        if self.mmd_bandwidths.is_empty() || self.mmd_bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(HaroodError::Config("mmd_bandwidths must be a nonempty list of positive values".into()));
        }
        if self.ddlearn_segments == 0 {
            return Err(HaroodError::Config("ddlearn_segments must be positive".into()));
        }
        Ok(())
    }
}

/// Minibatch from one source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    /// `(n, C, 1, T)`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domain_id: usize,
}

impl DomainBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, domain_id: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(HaroodError::Batch(format!("empty batch for domain {domain_id}")));
        }
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(HaroodError::Batch(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(DomainBatch {
            inputs,
            labels,
            domain_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Where one update sits in its run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub lr: f64,
    pub step_index: usize,
    pub total_steps: usize,
}

impl StepContext {
    pub fn new(lr: f64, step_index: usize, total_steps: usize) -> Self {
        StepContext {
            lr,
            step_index,
            total_steps,
        }
    }

    /// Fraction of training completed, in `[0, 1]`.
    pub fn progress(&self) -> f64 {
        if self.total_steps == 0 {
            1.0
        } else {
            (self.step_index as f64 / self.total_steps as f64).min(1.0)
        }
    }
}

/// Values computed during an objective evaluation that do not carry gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detached {
    pub weights: Vec<f64>,
    pub masks: Vec<Vec<usize>>,
    pub buffers: Vec<Vec<f64>>,
}

/// Loss decomposition plus the gradient of the training objective.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub total: f64,
    pub task: f64,
    pub penalty: f64,
    pub penalty_weight: f64,
    pub per_domain: Vec<f64>,
    pub grads: Vec<Tensor>,
    pub bn: Vec<BnRecord>,
    pub detached: Detached,
}

impl Evaluation {
    pub fn report(&self, step_index: usize) -> UpdateReport {
        UpdateReport {
            total_loss: self.total,
            task_loss: self.task,
            penalty: self.penalty,
            penalty_weight: self.penalty_weight,
            per_domain_risks: self.per_domain.clone(),
            step_index,
            grad_norm: global_norm(&self.grads),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.task, self.penalty].iter().all(|v| v.is_finite())
            && self.per_domain.iter().all(|v| v.is_finite())
            && self.grads.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub total_loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
    pub penalty_weight: f64,
    pub per_domain_risks: Vec<f64>,
    pub step_index: usize,
    pub grad_norm: f64,
}

impl UpdateReport {
    pub fn is_finite(&self) -> bool {
        [self.total_loss, self.task_loss, self.penalty, self.grad_norm]
            .iter()
            .all(|v| v.is_finite())
            && self.per_domain_risks.iter().all(|v| v.is_finite())
    }
}

pub trait Algorithm: Send {
    fn name(&self) -> &'static str;

    fn config(&self) -> &AlgorithmConfig;

    /// Adds whatever extra modules the algorithm trains (discriminator, global branch).
    fn prepare(&self, model: ModelBundle, _source_domains: usize, _rng: &mut ChaCha8Rng) -> Result<ModelBundle> {
        Ok(model)
    }

    /// Loss and gradient at `params`. With `frozen`, stop-gradient quantities are
    /// taken from it instead of being recomputed.
    fn objective(
        &self,
        model: &ModelBundle,
        params: &ParamStore,
        batches: &[DomainBatch],
        ctx: &StepContext,
        rng: &mut ChaCha8Rng,
        frozen: Option<&Detached>,
    ) -> Result<Evaluation>;

    /// Persists state produced by an accepted evaluation.
    fn commit(&mut self, _detached: &Detached) {}

    fn update(
        &mut self,
        model: &mut ModelBundle,
        opt: &mut Adam,
        batches: &[DomainBatch],
        ctx: &StepContext,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpdateReport> {
        let eval = self.objective(model, &model.params, batches, ctx, rng, None)?;
        apply_evaluation(self, model, opt, eval, ctx.lr, ctx.step_index)
    }

    /// Parameters used for evaluation and model selection.
    fn eval_params<'a>(&'a self, model: &'a ModelBundle) -> &'a ParamStore {
        &model.params
    }

    /// Persistent state flattened, for inspection.
    fn state(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Commits an evaluation and takes one Adam step at `lr`.
pub fn apply_evaluation<A: Algorithm + ?Sized>(
    alg: &mut A,
    model: &mut ModelBundle,
    opt: &mut Adam,
    eval: Evaluation,
    lr: f64,
    step_index: usize,
) -> Result<UpdateReport> {
    let report = eval.report(step_index);
    if !eval.is_finite() {
        return Err(HaroodError::Divergence(Box::new(report)));
    }
    alg.commit(&eval.detached);
    model.commit_bn(&eval.bn);
    opt.step(&mut model.params, &eval.grads, lr);
    if !model.params.is_finite() {
        return Err(HaroodError::Divergence(Box::new(report)));
    }
    Ok(report)
}

/// Rejects empty, mislabelled or malformed batches.
pub fn validate_batches(model: &ModelBundle, batches: &[DomainBatch]) -> Result<()> {
    if batches.is_empty() {
        return Err(HaroodError::Batch("no source batches".into()));
    }
    for b in batches {
        if b.labels.is_empty() {
            return Err(HaroodError::Batch(format!("empty batch for domain {}", b.domain_id)));
        }
        if b.inputs.shape().first() != Some(&b.labels.len()) {
            return Err(HaroodError::Batch(format!(
                "domain {}: {} labels for inputs {:?}",
                b.domain_id,
                b.labels.len(),
                b.inputs.shape()
            )));
        }
        if let Some(&y) = b.labels.iter().find(|&&y| y >= model.class_count()) {
            return Err(HaroodError::Batch(format!("label {y} outside 0..{}", model.class_count())));
        }
        model.check_batch(&b.inputs)?;
    }
    Ok(())
}

/// Concatenates batch inputs along the sample axis.
pub(crate) fn concat_inputs<'a>(inputs: impl IntoIterator<Item = &'a Tensor>) -> Tensor {
    let mut data = Vec::new();
    let mut shape: Vec<usize> = Vec::new();
    let mut n = 0;
    for t in inputs {
        if shape.is_empty() {
            shape = t.shape().to_vec();
        }
        n += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// One training-mode forward pass over all batches, pooled.
pub(crate) struct Pass {
    pub g: Graph,
    pub p: Vec<Var>,
    pub features: Features,
    pub logits: Var,
    pub labels: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
}

impl Pass {
    pub fn new(model: &ModelBundle, params: &ParamStore, batches: &[DomainBatch]) -> Self {
        let mut g = Graph::new();
        let p = model.bind(&mut g, params);
        let x = g.constant(concat_inputs(batches.iter().map(|b| &b.inputs)));
        let features = model.features(&mut g, &p, x, Mode::Train);
        let logits = model.classify(&mut g, &p, features.combined);
        let mut spans = Vec::with_capacity(batches.len());
        let mut labels = Vec::new();
        for b in batches {
            spans.push((labels.len(), labels.len() + b.len()));
            labels.extend_from_slice(&b.labels);
        }
        Pass {
            g,
            p,
            features,
            logits,
            labels,
            spans,
        }
    }

    pub fn pooled_ce(&mut self) -> Var {
        self.g.cross_entropy(self.logits, &self.labels)
    }

    /// Cross-entropy of `logits` restricted to each domain's rows.
    pub fn risks_of(&mut self, logits: Var) -> Vec<Var> {
        let spans = self.spans.clone();
        spans
            .iter()
            .map(|&(s, e)| {
                let l = self.g.slice_rows(logits, s, e);
                self.g.cross_entropy(l, &self.labels[s..e])
            })
            .collect()
    }

    pub fn risks(&mut self) -> Vec<Var> {
        self.risks_of(self.logits)
    }

    /// Rows of `v` belonging to each domain.
    pub fn split(&mut self, v: Var) -> Vec<Var> {
        let spans = self.spans.clone();
        spans.iter().map(|&(s, e)| self.g.slice_rows(v, s, e)).collect()
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.g.scalar(v)).collect()
    }

    /// Backward from `loss` and package the decomposition.
    pub fn finish(
        self,
        model: &ModelBundle,
        loss: Var,
        task: f64,
        penalty: f64,
        penalty_weight: f64,
        per_domain: Vec<f64>,
        detached: Detached,
    ) -> Evaluation {
        let grads = self.g.backward(loss).param_grads(&self.g, &model.params.shapes());
        Evaluation {
            total: task + penalty_weight * penalty,
            task,
            penalty,
            penalty_weight,
            per_domain,
            grads,
            bn: self.g.bn_records().to_vec(),
            detached,
        }
    }
}

/// Plain pooled cross-entropy evaluation; the shared task loss.
pub fn erm_evaluation(model: &ModelBundle, params: &ParamStore, batches: &[DomainBatch]) -> Result<Evaluation> {
    validate_batches(model, batches)?;
    let mut pass = Pass::new(model, params, batches);
    let loss = pass.pooled_ce();
    let risks = pass.risks();
    let per_domain = pass.values(&risks);
    let task = pass.g.scalar(loss);
    Ok(pass.finish(model, loss, task, 0.0, 0.0, per_domain, Detached::default()))
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DataManipulation,
    RepresentationLearning,
    LearningStrategy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlgorithmInfo {
    pub name: &'static str,
    pub year: u16,
    pub categories: &'static [Category],
}

use Category::{DataManipulation as Dm, LearningStrategy as Ls, RepresentationLearning as Rl};

pub const REGISTRY: [AlgorithmInfo; 16] = [
    AlgorithmInfo { name: "ERM", year: 1999, categories: &[] },
    AlgorithmInfo { name: "Mixup", year: 2020, categories: &[Dm] },
    AlgorithmInfo { name: "DDLearn", year: 2023, categories: &[Dm, Rl] },
    AlgorithmInfo { name: "DANN", year: 2016, categories: &[Rl] },
    AlgorithmInfo { name: "CORAL", year: 2016, categories: &[Rl] },
    AlgorithmInfo { name: "MMD", year: 2018, categories: &[Rl] },
    AlgorithmInfo { name: "VREx", year: 2021, categories: &[Rl, Ls] },
    AlgorithmInfo { name: "LAG", year: 2022, categories: &[Rl] },
    AlgorithmInfo { name: "MLDG", year: 2018, categories: &[Ls] },
    AlgorithmInfo { name: "RSC", year: 2020, categories: &[Ls] },
    AlgorithmInfo { name: "GroupDRO", year: 2020, categories: &[Ls] },
    AlgorithmInfo { name: "ANDMask", year: 2021, categories: &[Ls] },
    AlgorithmInfo { name: "Fish", year: 2022, categories: &[Ls] },
    AlgorithmInfo { name: "Fishr", year: 2023, categories: &[Ls] },
    AlgorithmInfo { name: "URM", year: 2024, categories: &[Ls] },
    AlgorithmInfo { name: "ERM++", year: 2025, categories: &[Ls] },
];

pub fn algorithm_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|i| i.name).collect()
}

/// Registry entry for `name`, matched case-insensitively.
pub fn algorithm_info(name: &str) -> Result<&'static AlgorithmInfo> {
    REGISTRY
        .iter()
        .find(|i| i.name.eq_ignore_ascii_case(name.trim()))
        .ok_or_else(|| {
            HaroodError::Registry(format!(
                "unknown algorithm {name:?}; known: {}",
                algorithm_names().join(", ")
            ))
        })
}

pub fn create_algorithm(name: &str, cfg: &AlgorithmConfig) -> Result<Box<dyn Algorithm>> {
    let info = algorithm_info(name)?;
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.name = info.name.to_string();
    Ok(match info.name {
        "ERM" => Box::new(Erm::new(cfg)),
        "Mixup" => Box::new(Mixup::new(cfg)),
        "DDLearn" => Box::new(DdLearn::new(cfg)),
        "DANN" => Box::new(Dann::new(cfg)),
        "CORAL" => Box::new(Coral::new(cfg)),
        "MMD" => Box::new(Mmd::new(cfg)),
        "VREx" => Box::new(Vrex::new(cfg)),
        "LAG" => Box::new(Lag::new(cfg)),
        "MLDG" => Box::new(Mldg::new(cfg)),
        "RSC" => Box::new(Rsc::new(cfg)),
        "GroupDRO" => Box::new(GroupDro::new(cfg)),
        "ANDMask" => Box::new(AndMask::new(cfg)),
        "Fish" => Box::new(Fish::new(cfg)),
        "Fishr" => Box::new(Fishr::new(cfg)),
        "URM" => Box::new(Urm::new(cfg)),
        "ERM++" => Box::new(ErmPlusPlus::new(cfg)),
        other => unreachable!("registry entry {other} has no factory"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_all_names_case_insensitively() {
        for info in REGISTRY {
            let alg = create_algorithm(&info.name.to_lowercase(), &AlgorithmConfig::default()).unwrap();
            assert_eq!(alg.name(), info.name);
        }
        assert!(matches!(
            create_algorithm("SWAD", &AlgorithmConfig::default()),
            Err(HaroodError::Registry(_))
        ));
    }

    #[test]
    fn config_rejects_out_of_range_knobs() {
        let mut c = AlgorithmConfig::default();
        c.andmask_tau = 1.5;
        assert!(c.validate().is_err());
        let mut c = AlgorithmConfig::default();
        c.penalty_weight = f64::NAN;
        assert!(c.validate().is_err());
        assert!(serde_yaml::from_str::<AlgorithmConfig>("bogus: 1").is_err());
    }

    #[test]
    fn concat_inputs_stacks_samples() {
        let a = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![2, 1, 1, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat_inputs([&a, &b]);
        assert_eq!(c.shape(), &[3, 1, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
