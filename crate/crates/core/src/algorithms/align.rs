//! Feature-alignment algorithms: CORAL, MMD, DANN, LAG and DDLearn.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::penalties::{coral_penalty, ddlearn_penalty, lag_alignment, mmd_penalty};
use super::{validate_batches, Algorithm, AlgorithmConfig, Detached, DomainBatch, Evaluation, Pass, StepContext};
use crate::error::{HaroodError, Result};
use crate::nn::backbone::{LagBranchConfig, Mode, ModelBundle};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub struct Coral {
    cfg: AlgorithmConfig,
}

impl Coral {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Coral { cfg }
    }
}

impl Algorithm for Coral {
    fn name(&self) -> &'static str {
        "CORAL"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    fn objective(
        &self,
        model: &ModelBundle,
        params: &ParamStore,
        batches: &[DomainBatch],
        _ctx: &StepContext,
        _rng: &mut ChaCha8Rng,
        _frozen: Option<&Detached>,
    ) -> Result<Evaluation> {
        validate_batches(model, batches)?;
        let lambda = self.cfg.penalty_weight;
        let mut pass = Pass::new(model, params, batches);
        let ce = pass.pooled_ce();
        let risks = pass.risks();
        let feats = pass.split(pass.features.combined);
        let pen = coral_penalty(&mut pass.g, &feats);
        let weighted = pass.g.scale(pen, lambda);
        let loss = pass.g.add(ce, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(pen));
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, Detached::default()))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub struct Mmd {
    cfg: AlgorithmConfig,
}

impl Mmd {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Mmd { cfg }
    }

    /// Kernel rates for the given pooled features.
    fn gammas(&self, pooled: &Tensor) -> Vec<f64> {
        if !self.cfg.mmd_median_heuristic {
            return self.cfg.mmd_bandwidths.clone();
        }
        let n = pooled.rows();
        let mut d = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(pooled.row(i).iter().zip(pooled.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let med = median(d);
        let scale = if med > 0.0 { 1.0 / med } else { 1.0 };
        self.cfg.mmd_bandwidths.iter().map(|b| b * scale).collect()
    }
}

impl Algorithm for Mmd {
    fn name(&self) -> &'static str {
        "MMD"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    fn objective(
        &self,
        model: &ModelBundle,
        params: &ParamStore,
        batches: &[DomainBatch],
        _ctx: &StepContext,
        _rng: &mut ChaCha8Rng,
        frozen: Option<&Detached>,
    ) -> Result<Evaluation> {
        validate_batches(model, batches)?;
        let lambda = self.cfg.penalty_weight;
        let mut pass = Pass::new(model, params, batches);
        let gammas = match frozen {
            Some(f) if !f.weights.is_empty() => f.weights.clone(),
            _ => self.gammas(pass.g.value(pass.features.combined)),
        };
        let ce = pass.pooled_ce();
        let risks = pass.risks();
        let feats = pass.split(pass.features.combined);
        let pen = mmd_penalty(&mut pass.g, &feats, &gammas);
        let weighted = pass.g.scale(pen, lambda);
        let loss = pass.g.add(ce, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(pen));
        let detached = Detached {
            weights: gammas,
            ..Detached::default()
        };
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, detached))
    }
}

/// Domain-adversarial training. The discriminator minimizes the domain
/// cross-entropy; the features below it receive that gradient times `−λ`.
pub struct Dann {
    cfg: AlgorithmConfig,
}

impl Dann {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Dann { cfg }
    }

    /// Reversal coefficient at a given point of training.
    pub fn coefficient(&self, ctx: &StepContext) -> f64 {
        if self.cfg.dann_annealing {
            let p = ctx.progress();
            self.cfg.penalty_weight * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
        } else {
            self.cfg.penalty_weight
        }
    }
}

impl Algorithm for Dann {
    fn name(&self) -> &'static str {
        "DANN"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    fn prepare(&self, model: ModelBundle, source_domains: usize, rng: &mut ChaCha8Rng) -> Result<ModelBundle> {
        if model.has_discriminator() {
            return Ok(model);
        }
        model.with_discriminator(source_domains, rng)
    }

    fn objective(
        &self,
        model: &ModelBundle,
        params: &ParamStore,
        batches: &[DomainBatch],
        ctx: &StepContext,
        _rng: &mut ChaCha8Rng,
        _frozen: Option<&Detached>,
    ) -> Result<Evaluation> {
        validate_batches(model, batches)?;
        if model.spec().discriminator_domains != Some(batches.len()) {
            return Err(HaroodError::Shape(format!(
                "discriminator built for {:?} domains, got {} batches",
                model.spec().discriminator_domains,
                batches.len()
            )));
        }
        let lambda = self.coefficient(ctx);
        let mut pass = Pass::new(model, params, batches);
        let ce = pass.pooled_ce();
        let risks = pass.risks();
        let rev = pass.g.grad_reverse(pass.features.combined, lambda);
        let dl = model.domain_logits(&mut pass.g, &pass.p, rev)?;
        let domain_labels: Vec<usize> = pass
            .spans
            .iter()
            .enumerate()
            .flat_map(|(k, &(s, e))| std::iter::repeat_n(k, e - s))
            .collect();
        let dom = pass.g.cross_entropy(dl, &domain_labels);
        let loss = pass.g.add(ce, dom);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(dom));
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, Detached::default()))
    }
}

/// Local/global feature alignment with a parallel global-context branch.
pub struct Lag {
    cfg: AlgorithmConfig,
}

impl Lag {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Lag { cfg }
    }
}

impl Algorithm for Lag {
    fn name(&self) -> &'static str {
        "LAG"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    fn prepare(&self, model: ModelBundle, _source_domains: usize, rng: &mut ChaCha8Rng) -> Result<ModelBundle> {
        if model.has_global_branch() {
            return Ok(model);
        }
        let branch = LagBranchConfig {
            width_fraction: self.cfg.lag_branch_fraction,
        };
        model.attach_lag_branch(&branch, rng)
    }

    fn objective(
        &self,
        model: &ModelBundle,
        params: &ParamStore,
        batches: &[DomainBatch],
        _ctx: &StepContext,
        _rng: &mut ChaCha8Rng,
        _frozen: Option<&Detached>,
    ) -> Result<Evaluation> {
        validate_batches(model, batches)?;
        if !model.has_global_branch() {
            return Err(HaroodError::Config("LAG needs a model with a global branch".into()));
        }
        let weight = self.cfg.lag_align_weight;
        let mut pass = Pass::new(model, params, batches);
        let ce = pass.pooled_ce();
        let risks = pass.risks();
        let local = model.local_descriptor(&mut pass.g, pass.features.local);
        let global = pass.features.global.expect("branch attached");
        let labels = pass.labels.clone();
        let spans = pass.spans.clone();
        let pen = lag_alignment(&mut pass.g, local, global, &labels, &spans);
        let weighted = pass.g.scale(pen, weight);
        let loss = pass.g.add(ce, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(pen));
        Ok(pass.finish(model, loss, task, penalty, weight, per_domain, Detached::default()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Jitter,
    Scaling,
    ChannelPermutation,
    TimeSegmentPermutation,
}

/// Segment boundaries splitting `len` into `k` nearly equal parts.
fn segments(len: usize, k: usize) -> Vec<(usize, usize)> {
    let k = k.clamp(1, len.max(1));
    (0..k).map(|i| (i * len / k, (i + 1) * len / k)).collect()
}

/// Applies one augmentation to every sample of an `(n, C, 1, T)` tensor.
pub fn augment(inputs: &Tensor, aug: Augmentation, cfg: &AlgorithmConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = inputs.shape();
    let (n, c, t) = (s[0], s[1], s[s.len() - 1]);
    let mut out = inputs.clone();
    match aug {
        Augmentation::Jitter => {
            if cfg.ddlearn_jitter_std > 0.0 {
                let noise = Normal::new(0.0, cfg.ddlearn_jitter_std)
                    .map_err(|e| HaroodError::Config(format!("ddlearn_jitter_std: {e}")))?;
                for v in out.data_mut() {
                    *v += noise.sample(rng);
                }
            }
        }
        Augmentation::Scaling => {
            if cfg.ddlearn_scale_std > 0.0 {
                let factor = Normal::new(1.0, cfg.ddlearn_scale_std)
                    .map_err(|e| HaroodError::Config(format!("ddlearn_scale_std: {e}")))?;
                for chunk in out.data_mut().chunks_mut(t) {
                    let f = factor.sample(rng);
                    for v in chunk {
                        *v *= f;
                    }
                }
            }
        }
        Augmentation::ChannelPermutation => {
            let src = inputs.data();
            let dst = out.data_mut();
            let mut perm: Vec<usize> = (0..c).collect();
            for i in 0..n {
                perm.shuffle(rng);
                for (to, &from) in perm.iter().enumerate() {
                    let a = (i * c + to) * t;
                    let b = (i * c + from) * t;
                    dst[a..a + t].copy_from_slice(&src[b..b + t]);
                }
            }
        }
        Augmentation::TimeSegmentPermutation => {
            let segs = segments(t, cfg.ddlearn_segments);
            let mut order: Vec<usize> = (0..segs.len()).collect();
            let src = inputs.data();
            let dst = out.data_mut();
            for i in 0..n {
                order.shuffle(rng);
                for ch in 0..c {
                    let base = (i * c + ch) * t;
                    let mut pos = base;
                    for &k in &order {
                        let (a, b) = segs[k];
                        dst[pos..pos + b - a].copy_from_slice(&src[base + a..base + b]);
                        pos += b - a;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Supervised loss on originals plus agreement/diversity over augmented views.
pub struct DdLearn {
    cfg: AlgorithmConfig,
}

impl DdLearn {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        DdLearn { cfg }
    }
}

impl Algorithm for DdLearn {
    fn name(&self) -> &'static str {
        "DDLearn"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    fn objective(
        &self,
        model: &ModelBundle,
        params: &ParamStore,
        batches: &[DomainBatch],
        _ctx: &StepContext,
        rng: &mut ChaCha8Rng,
        frozen: Option<&Detached>,
    ) -> Result<Evaluation> {
        validate_batches(model, batches)?;
        let lambda = self.cfg.penalty_weight;
        let mut pass = Pass::new(model, params, batches);
        let ce = pass.pooled_ce();
        let risks = pass.risks();
        let x_shape = {
            let mut s = batches[0].inputs.shape().to_vec();
            s[0] = pass.labels.len();
            s
        };
        let views: Vec<Tensor> = match frozen {
            Some(f) => f
                .buffers
                .iter()
                .map(|b| Tensor::new(x_shape.clone(), b.clone()))
                .collect(),
            None if lambda > 0.0 => {
                let pooled = super::concat_inputs(batches.iter().map(|b| &b.inputs));
                self.cfg
                    .ddlearn_augmentations
                    .iter()
                    .map(|&a| augment(&pooled, a, &self.cfg, rng))
                    .collect::<Result<_>>()?
            }
            None => Vec::new(),
        };
        let pen = if views.is_empty() {
            pass.g.constant(Tensor::scalar(0.0))
        } else {
            let z0 = pass.g.l2_normalize_rows(pass.features.combined);
            let zs: Vec<_> = views
                .iter()
                .map(|v| {
                    let x = pass.g.constant(v.clone());
                    let f = model.features(&mut pass.g, &pass.p, x, Mode::Train);
                    pass.g.l2_normalize_rows(f.combined)
                })
                .collect();
            ddlearn_penalty(&mut pass.g, z0, &zs)
        };
        let weighted = pass.g.scale(pen, lambda);
        let loss = pass.g.add(ce, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(pen));
        let detached = Detached {
            buffers: views.into_iter().map(Tensor::into_data).collect(),
            ..Detached::default()
        };
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, detached))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Tensor {
        Tensor::new(vec![2, 2, 1, 8], (0..32).map(|i| i as f64 * 0.5 - 3.0).collect())
    }

    #[test]
    fn identity_augmentations_are_bytewise_equal() {
        let mut cfg = AlgorithmConfig::default();
        cfg.ddlearn_jitter_std = 0.0;
        cfg.ddlearn_scale_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = sample();
        for a in [Augmentation::Jitter, Augmentation::Scaling] {
            let y = augment(&x, a, &cfg, &mut rng).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x), bits(&y));
        }
    }

    #[test]
    fn permutations_preserve_multisets() {
        let cfg = AlgorithmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sample();
        for a in [Augmentation::ChannelPermutation, Augmentation::TimeSegmentPermutation] {
            let y = augment(&x, a, &cfg, &mut rng).unwrap();
            for i in 0..2 {
                let mut a: Vec<f64> = x.data()[i * 16..(i + 1) * 16].to_vec();
                let mut b: Vec<f64> = y.data()[i * 16..(i + 1) * 16].to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn segment_bounds_cover_length() {
        assert_eq!(segments(10, 4), vec![(0, 2), (2, 5), (5, 7), (7, 10)]);
        assert_eq!(segments(2, 4), vec![(0, 1), (1, 2)]);
    }
}
