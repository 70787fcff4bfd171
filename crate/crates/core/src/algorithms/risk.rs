//! Algorithms that reshape the classification risk: ERM, Mixup, GroupDRO, VREx, URM, ERM++.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::penalties::{urm_penalty, variance_penalty};
use super::{
    apply_evaluation, erm_evaluation, shuffled, validate_batches, Algorithm, AlgorithmConfig, Detached,
    DomainBatch, Evaluation, Pass, StepContext, UpdateReport,
};
use crate::error::{HaroodError, Result};
use crate::nn::backbone::ModelBundle;
use crate::nn::optim::Adam;
use crate::nn::params::ParamStore;

pub struct Erm {
    cfg: AlgorithmConfig,
}

impl Erm {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Erm { cfg }
    }
}

impl Algorithm for Erm {
    fn name(&self) -> &'static str {
        "ERM"
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
        erm_evaluation(model, params, batches)
    }
}

/// Inter-domain mixup. Domains are shuffled and paired cyclically; a single
/// domain is mixed with a row permutation of itself.
pub struct Mixup {
    cfg: AlgorithmConfig,
}

impl Mixup {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Mixup { cfg }
    }
}

impl Algorithm for Mixup {
    fn name(&self) -> &'static str {
        "Mixup"
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
        let s = batches.len();
        let order = match frozen.and_then(|f| f.masks.first()) {
            Some(o) => o.clone(),
            None => shuffled(s, rng),
        };
        let self_perm = if s == 1 {
            match frozen.and_then(|f| f.masks.get(1)) {
                Some(p) => p.clone(),
                None => shuffled(batches[0].len(), rng),
            }
        } else {
            Vec::new()
        };
        let lambdas = match frozen {
            Some(f) if f.weights.len() == s => f.weights.clone(),
            _ => {
                let beta = Beta::new(self.cfg.mixup_alpha, self.cfg.mixup_alpha)
                    .map_err(|e| HaroodError::Config(format!("mixup_alpha: {e}")))?;
                (0..s).map(|_| beta.sample(rng)).collect()
            }
        };

        let mut mixed = Vec::with_capacity(s);
        let mut second_labels = Vec::with_capacity(s);
        for k in 0..s {
            let bi = &batches[order[k]];
            let (xj, yj) = if s == 1 {
                let yj: Vec<usize> = self_perm.iter().map(|&r| bi.labels[r]).collect();
                (bi.inputs.gather_rows(&self_perm), yj)
            } else {
                let bj = &batches[order[(k + 1) % s]];
                (bj.inputs.clone(), bj.labels.clone())
            };
            let n = bi.len().min(yj.len());
            let rows: Vec<usize> = (0..n).collect();
            let xi = bi.inputs.gather_rows(&rows);
            let xj = xj.gather_rows(&rows);
            let lam = lambdas[k];
            let x = xi.zip_map(&xj, |a, b| lam * a + (1.0 - lam) * b);
            mixed.push(DomainBatch {
                inputs: x,
                labels: bi.labels[..n].to_vec(),
                domain_id: bi.domain_id,
            });
            second_labels.push(yj[..n].to_vec());
        }

        let mut pass = Pass::new(model, params, &mixed);
        let first = pass.risks();
        let mut pair_losses = Vec::with_capacity(s);
        for k in 0..s {
            let (a, b) = pass.spans[k];
            let l = pass.g.slice_rows(pass.logits, a, b);
            let second = pass.g.cross_entropy(l, &second_labels[k]);
            let t1 = pass.g.scale(first[k], lambdas[k]);
            let t2 = pass.g.scale(second, 1.0 - lambdas[k]);
            pair_losses.push(pass.g.add(t1, t2));
        }
        let stacked = pass.g.stack(&pair_losses);
        let loss = pass.g.mean_all(stacked);
        let per_domain = pass.values(&pair_losses);
        let task = pass.g.scalar(loss);
        let mut masks = vec![order];
        if s == 1 {
            masks.push(self_perm);
        }
        let detached = Detached {
            weights: lambdas,
            masks,
            buffers: Vec::new(),
        };
        Ok(pass.finish(model, loss, task, 0.0, 0.0, per_domain, detached))
    }
}

/// Exponentiated-gradient reweighting: `w_i ∝ prior_i · exp(η·risk_i)`.
pub fn dro_reweight(prior: &[f64], risks: &[f64], eta: f64) -> Vec<f64> {
    let logs: Vec<f64> = prior.iter().zip(risks).map(|(p, r)| p.ln() + eta * r).collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return vec![1.0 / prior.len() as f64; prior.len()];
    }
    let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub struct GroupDro {
    cfg: AlgorithmConfig,
    weights: Option<Vec<f64>>,
}

impl GroupDro {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        GroupDro { cfg, weights: None }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }
}

impl Algorithm for GroupDro {
    fn name(&self) -> &'static str {
        "GroupDRO"
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
        let s = batches.len();
        let mut pass = Pass::new(model, params, batches);
        let risks = pass.risks();
        let values = pass.values(&risks);
        let w = match frozen {
            Some(f) if f.weights.len() == s => f.weights.clone(),
            _ => {
                let prior = match &self.weights {
                    Some(w) if w.len() == s => w.clone(),
                    _ => vec![1.0 / s as f64; s],
                };
                dro_reweight(&prior, &values, self.cfg.dro_eta)
            }
        };
        let terms: Vec<_> = risks.iter().zip(&w).map(|(&r, &wi)| pass.g.scale(r, wi)).collect();
        let stacked = pass.g.stack(&terms);
        let loss = pass.g.sum_all(stacked);
        let task = pass.g.scalar(loss);
        let detached = Detached {
            weights: w,
            ..Detached::default()
        };
        Ok(pass.finish(model, loss, task, 0.0, 0.0, values, detached))
    }

    fn commit(&mut self, detached: &Detached) {
        self.weights = Some(detached.weights.clone());
    }

    fn state(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_default()
    }
}

pub struct Vrex {
    cfg: AlgorithmConfig,
}

impl Vrex {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Vrex { cfg }
    }

    /// Penalty weight in effect at `step_index`.
    pub fn weight_at(&self, step_index: usize) -> f64 {
        if step_index < self.cfg.vrex_warmup_steps {
            1.0
        } else {
            self.cfg.penalty_weight
        }
    }
}

impl Algorithm for Vrex {
    fn name(&self) -> &'static str {
        "VREx"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
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
        let lambda = self.weight_at(ctx.step_index);
        let mut pass = Pass::new(model, params, batches);
        let risks = pass.risks();
        let stacked = pass.g.stack(&risks);
        let mean = pass.g.mean_all(stacked);
        let var = variance_penalty(&mut pass.g, &risks);
        let weighted = pass.g.scale(var, lambda);
        let loss = pass.g.add(mean, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(mean), pass.g.scalar(var));
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, Detached::default()))
    }
}

pub struct Urm {
    cfg: AlgorithmConfig,
}

impl Urm {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Urm { cfg }
    }
}

impl Algorithm for Urm {
    fn name(&self) -> &'static str {
        "URM"
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
        let pen = urm_penalty(&mut pass.g, &risks, self.cfg.urm_temperature);
        let weighted = pass.g.scale(pen, lambda);
        let loss = pass.g.add(ce, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(pen));
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, Detached::default()))
    }
}

/// Learning rate after linear warmup over `ceil(frac·total)` steps.
pub fn warmup_lr(lr: f64, step_index: usize, total_steps: usize, frac: f64) -> f64 {
    let warm = (frac * total_steps as f64).ceil() as usize;
    if warm == 0 {
        lr
    } else {
        lr * ((step_index + 1) as f64 / warm as f64).min(1.0)
    }
}

/// `ema ← decay·ema + (1−decay)·current`.
pub fn ema_update(ema: &mut [f64], current: &[f64], decay: f64) {
    for (e, &c) in ema.iter_mut().zip(current) {
        *e = decay * *e + (1.0 - decay) * c;
    }
}

/// Zero-started average after `steps` updates, divided by `1 − decay^steps`
/// so the weights over the visited iterates sum to one.
pub fn debiased(acc: &[f64], decay: f64, steps: u32) -> Vec<f64> {
    let c = 1.0 - decay.powi(steps as i32);
    acc.iter().map(|a| a / c).collect()
}

/// ERM with learning-rate warmup and a debiased exponential moving average of
/// the parameters used for evaluation.
pub struct ErmPlusPlus {
    cfg: AlgorithmConfig,
    acc: Vec<f64>,
    steps: u32,
    ema: Option<ParamStore>,
}

impl ErmPlusPlus {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        ErmPlusPlus {
            cfg,
            acc: Vec::new(),
            steps: 0,
            ema: None,
        }
    }

    pub fn ema(&self) -> Option<&ParamStore> {
        self.ema.as_ref()
    }
}

impl Algorithm for ErmPlusPlus {
    fn name(&self) -> &'static str {
        "ERM++"
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
        erm_evaluation(model, params, batches)
    }

    fn update(
        &mut self,
        model: &mut ModelBundle,
        opt: &mut Adam,
        batches: &[DomainBatch],
        ctx: &StepContext,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpdateReport> {
        let eval = self.objective(model, &model.params, batches, ctx, rng, None)?;
        let lr = warmup_lr(ctx.lr, ctx.step_index, ctx.total_steps, self.cfg.erm_pp_warmup_frac);
        let report = apply_evaluation(self, model, opt, eval, lr, ctx.step_index)?;
        let current = model.params.to_flat();
        if self.acc.len() != current.len() {
            self.acc = vec![0.0; current.len()];
            self.steps = 0;
        }
        let decay = self.cfg.erm_pp_ema_decay;
        ema_update(&mut self.acc, &current, decay);
        self.steps += 1;
        let averaged = if decay < 1.0 { debiased(&self.acc, decay, self.steps) } else { current };
        self.ema = Some(model.params.with_flat(&averaged));
        Ok(report)
    }

    fn eval_params<'a>(&'a self, model: &'a ModelBundle) -> &'a ParamStore {
        match &self.ema {
            Some(e) if e.len() == model.params.len() => e,
            _ => &model.params,
        }
    }

    fn state(&self) -> Vec<f64> {
        self.ema.as_ref().map(ParamStore::to_flat).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dro_hand_example() {
        let w = dro_reweight(&[0.5, 0.5], &[1.0, 2.0], 1.0);
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + e * e)).abs() < 1e-12);
        assert!((w[1] - e * e / (e + e * e)).abs() < 1e-12);
        assert_eq!(dro_reweight(&[0.25; 4], &[0.3; 4], 0.7), vec![0.25; 4]);
    }

    #[test]
    fn warmup_and_ema_recursions() {
        assert_eq!(warmup_lr(0.1, 0, 100, 0.0), 0.1);
        assert!((warmup_lr(0.1, 0, 100, 0.05) - 0.02).abs() < 1e-15);
        assert_eq!(warmup_lr(0.1, 10, 100, 0.05), 0.1);

        let (p0, p1, p2) = (1.0, 3.0, -2.0);
        let mut ema = vec![p0];
        ema_update(&mut ema, &[p1], 0.5);
        ema_update(&mut ema, &[p2], 0.5);
        assert!((ema[0] - (0.25 * p0 + 0.25 * p1 + 0.5 * p2)).abs() < 1e-15);
        ema_update(&mut ema, &[7.0], 0.0);
        assert_eq!(ema[0], 7.0);

        let d = 0.9;
        let mut acc = vec![0.0];
        ema_update(&mut acc, &[p1], d);
        assert!((debiased(&acc, d, 1)[0] - p1).abs() < 1e-15);
        ema_update(&mut acc, &[p2], d);
        assert!((debiased(&acc, d, 2)[0] - (d * p1 + p2) / (1.0 + d)).abs() < 1e-14);
    }
}
