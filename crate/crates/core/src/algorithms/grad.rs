//! Algorithms that act on gradients or parameters directly: ANDMask, Fish, Fishr, MLDG, RSC.

use rand_chacha::ChaCha8Rng;

use super::penalties::fishr_penalty;
use super::{
    erm_evaluation, shuffled, validate_batches, Algorithm, AlgorithmConfig, Detached, DomainBatch, Evaluation,
    Pass, StepContext, UpdateReport,
};
use crate::error::{HaroodError, Result};
use crate::nn::backbone::ModelBundle;
use crate::nn::graph::BnRecord;
use crate::nn::optim::Adam;
use crate::nn::params::{flatten, unflatten, ParamStore};
use crate::nn::tensor::Tensor;

/// Keeps a component iff `|mean_d sign(g_d)| ≥ τ`; kept components take the mean gradient.
pub fn and_mask(grads: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let s = grads.len() as f64;
    let len = grads.first().map_or(0, Vec::len);
    (0..len)
        .map(|k| {
            let (mut sign, mut sum) = (0.0, 0.0);
            for g in grads {
                let v = g[k];
                sum += v;
                sign += if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            if (sign / s).abs() >= tau - 1e-12 {
                sum / s
            } else {
                0.0
            }
        })
        .collect()
}

pub struct AndMask {
    cfg: AlgorithmConfig,
}

impl AndMask {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        AndMask { cfg }
    }
}

impl Algorithm for AndMask {
    fn name(&self) -> &'static str {
        "ANDMask"
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
        let mut pass = Pass::new(model, params, batches);
        let ce = pass.pooled_ce();
        let risks = pass.risks();
        let shapes = params.shapes();
        let per: Vec<Vec<f64>> = risks
            .iter()
            .map(|&r| flatten(&pass.g.backward(r).param_grads(&pass.g, &shapes)))
            .collect();
        let masked = and_mask(&per, self.cfg.andmask_tau);
        let task = pass.g.scalar(ce);
        Ok(Evaluation {
            total: task,
            task,
            penalty: 0.0,
            penalty_weight: 0.0,
            per_domain: pass.values(&risks),
            grads: unflatten(&shapes, &masked),
            bn: pass.g.bn_records().to_vec(),
            detached: Detached::default(),
        })
    }
}

/// One Fish meta-step on a flat parameter vector.
///
/// Runs plain gradient steps of size `inner_lr` on a copy of `theta`, one per domain
/// in `order`, then moves `theta` by `meta_lr` toward the adapted copy.
/// Returns `(new_theta, adapted)`.
pub fn fish_meta_step(
    theta: &[f64],
    order: &[usize],
    inner_lr: f64,
    meta_lr: f64,
    mut grad: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut adapted = theta.to_vec();
    for &d in order {
        let g = grad(d, &adapted)?;
        for (a, gv) in adapted.iter_mut().zip(g) {
            *a -= inner_lr * gv;
        }
    }
    let new = theta
        .iter()
        .zip(&adapted)
        .map(|(t, a)| t + meta_lr * (a - t))
        .collect();
    Ok((new, adapted))
}

pub struct Fish {
    cfg: AlgorithmConfig,
}

impl Fish {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Fish { cfg }
    }
}

impl Algorithm for Fish {
    fn name(&self) -> &'static str {
        "Fish"
    }

    fn config(&self) -> &AlgorithmConfig {
        &self.cfg
    }

    /// The per-domain inner objective, pooled.
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

    /// Applies the meta-update directly; the Adam state is left untouched.
    fn update(
        &mut self,
        model: &mut ModelBundle,
        _opt: &mut Adam,
        batches: &[DomainBatch],
        ctx: &StepContext,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpdateReport> {
        validate_batches(model, batches)?;
        let order = shuffled(batches.len(), rng);
        let inner_lr = self.cfg.fish_inner_lr.unwrap_or(ctx.lr);
        let theta = model.params.to_flat();
        let mut losses = vec![0.0; batches.len()];
        let mut records: Vec<Vec<BnRecord>> = Vec::new();
        let (new, adapted) = {
            let m: &ModelBundle = model;
            fish_meta_step(&theta, &order, inner_lr, self.cfg.fish_meta_lr, |d, th| {
                let e = erm_evaluation(m, &m.params.with_flat(th), std::slice::from_ref(&batches[d]))?;
                losses[d] = e.task;
                records.push(e.bn);
                Ok(flatten(&e.grads))
            })?
        };
        let task = losses.iter().sum::<f64>() / losses.len() as f64;
        let grad_norm = if inner_lr > 0.0 {
            theta
                .iter()
                .zip(&adapted)
                .map(|(t, a)| (t - a) * (t - a))
                .sum::<f64>()
                .sqrt()
                / inner_lr
        } else {
            0.0
        };
        let report = UpdateReport {
            total_loss: task,
            task_loss: task,
            penalty: 0.0,
            penalty_weight: 0.0,
            per_domain_risks: losses,
            step_index: ctx.step_index,
            grad_norm,
        };
        if !report.is_finite() || new.iter().any(|v| !v.is_finite()) {
            return Err(HaroodError::Divergence(Box::new(report)));
        }
        for r in &records {
            model.commit_bn(r);
        }
        model.params = model.params.with_flat(&new);
        Ok(report)
    }
}

pub struct Fishr {
    cfg: AlgorithmConfig,
    ema: Option<Vec<Vec<f64>>>,
}

impl Fishr {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Fishr { cfg, ema: None }
    }
}

impl Algorithm for Fishr {
    fn name(&self) -> &'static str {
        "Fishr"
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
        let decay = self.cfg.fishr_ema_decay;
        let classes = model.class_count();
        let mut pass = Pass::new(model, params, batches);
        let ce = pass.pooled_ce();
        let risks = pass.risks();

        // per-sample gradients of the per-sample loss w.r.t. the head: f ⊗ (p − y), p − y
        let n = pass.labels.len();
        let mut onehot = vec![0.0; n * classes];
        for (i, &y) in pass.labels.iter().enumerate() {
            onehot[i * classes + y] = 1.0;
        }
        let y = pass.g.constant(Tensor::matrix(n, classes, onehot));
        let p = pass.g.softmax(pass.logits);
        let r = pass.g.sub(p, y);
        let outer = pass.g.row_outer(pass.features.combined, r);
        let per_sample = pass.g.concat_cols(&[outer, r]);

        let rows = pass.split(per_sample);
        let mut variances = Vec::with_capacity(rows.len());
        for (d, gd) in rows.into_iter().enumerate() {
            let mean = pass.g.mean_rows(gd);
            let neg = pass.g.scale(mean, -1.0);
            let centered = pass.g.add_row(gd, neg);
            let sq = pass.g.square(centered);
            let v = pass.g.mean_rows(sq);
            let smoothed = match self.ema.as_ref().and_then(|e| e.get(d)) {
                Some(old) if old.len() == pass.g.value(v).len() => {
                    let prev = pass.g.constant(Tensor::vector(old.iter().map(|o| decay * o).collect()));
                    let cur = pass.g.scale(v, 1.0 - decay);
                    pass.g.add(cur, prev)
                }
                _ => v,
            };
            variances.push(smoothed);
        }
        let pen = fishr_penalty(&mut pass.g, &variances);
        let weighted = pass.g.scale(pen, lambda);
        let loss = pass.g.add(ce, weighted);
        let per_domain = pass.values(&risks);
        let (task, penalty) = (pass.g.scalar(ce), pass.g.scalar(pen));
        let detached = Detached {
            buffers: variances.iter().map(|&v| pass.g.value(v).data().to_vec()).collect(),
            ..Detached::default()
        };
        Ok(pass.finish(model, loss, task, penalty, lambda, per_domain, detached))
    }

    fn commit(&mut self, detached: &Detached) {
        self.ema = Some(detached.buffers.clone());
    }

    fn state(&self) -> Vec<f64> {
        self.ema.iter().flatten().flatten().copied().collect()
    }
}

/// Value and gradient of `L_tr(θ) + β·L_te(θ − α∇L_tr(θ))` on a flat vector.
///
/// The first-order form drops the Hessian term; the second-order form adds
/// `−αβ·H_tr·∇L_te(θ′)` with the Hessian-vector product taken by central
/// differences of `∇L_tr`. Returns `(L_tr(θ), L_te(θ′), gradient)`.
pub fn mldg_objective(
    theta: &[f64],
    alpha: f64,
    beta: f64,
    second_order: bool,
    mut train: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    mut test: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<(f64, f64, Vec<f64>)> {
    let (l_tr, g_tr) = train(theta)?;
    let moved: Vec<f64> = theta.iter().zip(&g_tr).map(|(t, g)| t - alpha * g).collect();
    let (l_te, g_te) = test(&moved)?;
    let mut grad: Vec<f64> = g_tr.iter().zip(&g_te).map(|(a, b)| a + beta * b).collect();
    if second_order && alpha != 0.0 && beta != 0.0 {
        let norm = g_te.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let h = 1e-4 / norm;
            let plus: Vec<f64> = theta.iter().zip(&g_te).map(|(t, v)| t + h * v).collect();
            let minus: Vec<f64> = theta.iter().zip(&g_te).map(|(t, v)| t - h * v).collect();
            let (_, gp) = train(&plus)?;
            let (_, gm) = train(&minus)?;
            for ((g, a), b) in grad.iter_mut().zip(&gp).zip(&gm) {
                *g -= alpha * beta * (a - b) / (2.0 * h);
            }
        }
    }
    Ok((l_tr, l_te, grad))
}

pub struct Mldg {
    cfg: AlgorithmConfig,
}

impl Mldg {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Mldg { cfg }
    }
}

impl Algorithm for Mldg {
    fn name(&self) -> &'static str {
        "MLDG"
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
        rng: &mut ChaCha8Rng,
        frozen: Option<&Detached>,
    ) -> Result<Evaluation> {
        validate_batches(model, batches)?;
        let s = batches.len();
        let order = match frozen.and_then(|f| f.masks.first()) {
            Some(o) => o.clone(),
            None => shuffled(s, rng),
        };
        let (tr_idx, te_idx): (Vec<usize>, Vec<usize>) = if s == 1 {
            (vec![0], vec![0])
        } else {
            (order[..s - 1].to_vec(), order[s - 1..].to_vec())
        };
        let pick = |idx: &[usize]| idx.iter().map(|&i| batches[i].clone()).collect::<Vec<_>>();
        let (tr, te) = (pick(&tr_idx), pick(&te_idx));
        let alpha = self.cfg.mldg_inner_lr.unwrap_or(ctx.lr);
        let beta = self.cfg.mldg_beta;

        let mut bn: Option<Vec<BnRecord>> = None;
        let mut per_domain = vec![0.0; s];
        let mut tr_risks: Option<Vec<f64>> = None;
        let mut te_risks = Vec::new();
        let (l_tr, l_te, grad) = mldg_objective(
            &params.to_flat(),
            alpha,
            beta,
            self.cfg.mldg_second_order,
            |th| {
                let e = erm_evaluation(model, &params.with_flat(th), &tr)?;
                if bn.is_none() {
                    bn = Some(e.bn);
                    tr_risks = Some(e.per_domain.clone());
                }
                Ok((e.task, flatten(&e.grads)))
            },
            |th| {
                let e = erm_evaluation(model, &params.with_flat(th), &te)?;
                te_risks = e.per_domain.clone();
                Ok((e.task, flatten(&e.grads)))
            },
        )?;
        if s > 1 {
            for (&i, r) in tr_idx.iter().zip(tr_risks.unwrap_or_default()) {
                per_domain[i] = r;
            }
            for (&i, r) in te_idx.iter().zip(te_risks) {
                per_domain[i] = r;
            }
        } else {
            per_domain = tr_risks.unwrap_or_default();
        }
        Ok(Evaluation {
            total: l_tr + beta * l_te,
            task: l_tr,
            penalty: l_te,
            penalty_weight: beta,
            per_domain,
            grads: unflatten(&params.shapes(), &grad),
            bn: bn.unwrap_or_default(),
            detached: Detached {
                masks: vec![order],
                ..Detached::default()
            },
        })
    }
}

/// Feature indices to drop per sample: the top `round(f·F)` units by
/// `feature × ∂score_y/∂feature`, for the `round(b·n)` samples whose true-class
/// probability falls most once those units are removed. Other samples get none.
pub fn rsc_masks(
    features: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    labels: &[usize],
    feature_pct: f64,
    batch_pct: f64,
) -> Vec<Vec<usize>> {
    let (n, f) = (features.rows(), features.cols());
    let c = weight.cols();
    let k = ((feature_pct * f as f64).round() as usize).min(f);
    let nb = ((batch_pct * n as f64).round() as usize).min(n);
    if k == 0 || nb == 0 {
        return vec![Vec::new(); n];
    }
    let w = weight.data();
    let prob = |logits: &[f64], y: usize| {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        (logits[y] - m).exp() / z
    };
    let mut tops = Vec::with_capacity(n);
    let mut drops = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate().take(n) {
        let x = features.row(i);
        let mut idx: Vec<usize> = (0..f).collect();
        idx.sort_by(|&a, &b| (x[b] * w[b * c + y]).total_cmp(&(x[a] * w[a * c + y])).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
        let mut logits: Vec<f64> = bias.data().to_vec();
        for (j, &xv) in x.iter().enumerate() {
            for (l, &wv) in logits.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                *l += xv * wv;
            }
        }
        let before = prob(&logits, y);
        for &j in &idx {
            for (l, &wv) in logits.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                *l -= x[j] * wv;
            }
        }
        drops.push(before - prob(&logits, y));
        tops.push(idx);
    }
    let mut by_drop: Vec<usize> = (0..n).collect();
    by_drop.sort_by(|&a, &b| drops[b].total_cmp(&drops[a]).then(a.cmp(&b)));
    let mut masks = vec![Vec::new(); n];
    for &i in &by_drop[..nb] {
        masks[i] = std::mem::take(&mut tops[i]);
    }
    masks
}

pub struct Rsc {
    cfg: AlgorithmConfig,
}

impl Rsc {
    pub fn new(cfg: AlgorithmConfig) -> Self {
        Rsc { cfg }
    }
}

impl Algorithm for Rsc {
    fn name(&self) -> &'static str {
        "RSC"
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
        let mut pass = Pass::new(model, params, batches);
        let feats = pass.features.combined;
        let (n, f) = (pass.g.value(feats).rows(), pass.g.value(feats).cols());
        let masks = match frozen {
            Some(d) if d.masks.len() == n => d.masks.clone(),
            _ => {
                let (ws, bs) = model.classifier_slots();
                rsc_masks(
                    pass.g.value(feats),
                    params.get(ws),
                    params.get(bs),
                    &pass.labels,
                    self.cfg.rsc_feature_pct,
                    self.cfg.rsc_batch_pct,
                )
            }
        };
        let mut keep = vec![1.0; n * f];
        for (i, m) in masks.iter().enumerate() {
            for &j in m {
                keep[i * f + j] = 0.0;
            }
        }
        let keep = pass.g.constant(Tensor::matrix(n, f, keep));
        let masked = pass.g.mul(feats, keep);
        let logits = model.classify(&mut pass.g, &pass.p, masked);
        let loss = pass.g.cross_entropy(logits, &pass.labels.clone());
        let risks = pass.risks_of(logits);
        let per_domain = pass.values(&risks);
        let task = pass.g.scalar(loss);
        let detached = Detached {
            masks,
            ..Detached::default()
        };
        Ok(pass.finish(model, loss, task, 0.0, 0.0, per_domain, detached))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn and_mask_examples() {
        assert_eq!(and_mask(&[vec![1.0], vec![2.0]], 1.0), vec![1.5]);
        assert_eq!(and_mask(&[vec![1.0], vec![-1.0]], 1.0), vec![0.0]);
        assert_eq!(and_mask(&[vec![1.0, -3.0], vec![-1.0, 1.0]], 0.0), vec![0.0, -1.0]);
    }

    #[test]
    fn fish_quadratic_toy() {
        let (new, adapted) =
            fish_meta_step(&[0.0], &[0, 1], 0.1, 0.5, |d, th| Ok(vec![2.0 * (th[0] - (d + 1) as f64)])).unwrap();
        assert!((adapted[0] - 0.56).abs() < 1e-12);
        assert!((new[0] - 0.28).abs() < 1e-12);
    }

    #[test]
    fn mldg_quadratic_toy() {
        let tr = |t: &[f64]| Ok((t[0] * t[0], vec![2.0 * t[0]]));
        let te = |t: &[f64]| Ok(((t[0] - 1.0).powi(2), vec![2.0 * (t[0] - 1.0)]));
        let (l_tr, l_te, g) = mldg_objective(&[1.0], 0.1, 1.0, false, tr, te).unwrap();
        assert!((l_tr + l_te - 1.04).abs() < 1e-12);
        assert!((g[0] - (2.0 - 0.4)).abs() < 1e-12);
        // exact derivative of θ² + (0.8θ − 1)²: 2θ + 1.6(0.8θ − 1)
        let (_, _, g2) = mldg_objective(&[1.0], 0.1, 1.0, true, tr, te).unwrap();
        assert!((g2[0] - (2.0 + 1.6 * (0.8 - 1.0))).abs() < 1e-8);
    }

    #[test]
    fn rsc_full_mask_hits_every_feature() {
        let feats = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let w = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = Tensor::vector(vec![0.1, -0.1]);
        let m = rsc_masks(&feats, &w, &b, &[0, 1], 1.0, 1.0);
        assert_eq!(m, vec![vec![0, 1, 2], vec![0, 1, 2]]);
        assert!(rsc_masks(&feats, &w, &b, &[0, 1], 0.0, 1.0).iter().all(Vec::is_empty));
        let half = rsc_masks(&feats, &w, &b, &[0, 1], 1.0 / 3.0, 0.5);
        assert_eq!(half.iter().filter(|m| !m.is_empty()).count(), 1);
    }
}
