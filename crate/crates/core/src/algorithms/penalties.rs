//! Penalty terms built on graph handles, usable on model features or on constants.

use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let Some((&first, rest)) = terms.split_first() else {
        return zero(g);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

fn pair_mean(g: &mut Graph, items: &[Var], mut term: impl FnMut(&mut Graph, Var, Var) -> Var) -> Var {
    let mut terms = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            terms.push(term(g, items[i], items[j]));
        }
    }
    mean_of(g, &terms)
}

/// Mean vector and unbiased covariance of the rows of `x` (`n × d`).
fn moments(g: &mut Graph, x: Var) -> (Var, Var) {
    let n = g.value(x).rows();
    let mu = g.mean_rows(x);
    let neg = g.scale(mu, -1.0);
    let centered = g.add_row(x, neg);
    let ct = g.transpose(centered);
    let prod = g.matmul(ct, centered);
    let cov = g.scale(prod, 1.0 / (n.max(2) - 1) as f64);
    (mu, cov)
}

fn sq_dist(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let s = g.square(d);
    g.sum_all(s)
}

/// Average over domain pairs of `‖μ_i − μ_j‖² + ‖C_i − C_j‖²_F`.
pub fn coral_penalty(g: &mut Graph, features: &[Var]) -> Var {
    let stats: Vec<(Var, Var)> = features.iter().map(|&f| moments(g, f)).collect();
    let mut terms = Vec::new();
    for i in 0..stats.len() {
        for j in i + 1..stats.len() {
            let m = sq_dist(g, stats[i].0, stats[j].0);
            let c = sq_dist(g, stats[i].1, stats[j].1);
            terms.push(g.add(m, c));
        }
    }
    mean_of(g, &terms)
}

/// `Σ_γ exp(−γ·d)` applied elementwise to a matrix of squared distances.
pub fn gaussian_kernel_sum(g: &mut Graph, sq_dists: Var, gammas: &[f64]) -> Var {
    let mut acc: Option<Var> = None;
    for &gamma in gammas {
        let s = g.scale(sq_dists, -gamma);
        let k = g.exp(s);
        acc = Some(match acc {
            Some(a) => g.add(a, k),
            None => k,
        });
    }
    acc.expect("at least one bandwidth")
}

fn mmd2(g: &mut Graph, x: Var, y: Var, gammas: &[f64]) -> Var {
    let mean_kernel = |g: &mut Graph, a: Var, b: Var| {
        let d = g.pair_sq_dist(a, b);
        let k = gaussian_kernel_sum(g, d, gammas);
        g.mean_all(k)
    };
    let kxx = mean_kernel(g, x, x);
    let kyy = mean_kernel(g, y, y);
    let kxy = mean_kernel(g, x, y);
    let s = g.add(kxx, kyy);
    let cross = g.scale(kxy, -2.0);
    g.add(s, cross)
}

/// Average over domain pairs of the biased squared MMD.
pub fn mmd_penalty(g: &mut Graph, features: &[Var], gammas: &[f64]) -> Var {
    pair_mean(g, features, |g, a, b| mmd2(g, a, b, gammas))
}

/// Population variance of scalar risks.
pub fn variance_penalty(g: &mut Graph, risks: &[Var]) -> Var {
    let m = mean_of(g, risks);
    let dev: Vec<Var> = risks
        .iter()
        .map(|&r| {
            let d = g.sub(r, m);
            g.square(d)
        })
        .collect();
    mean_of(g, &dev)
}

/// `(1/S) Σ_d ‖v_d − v̄‖²` over per-domain variance vectors.
pub fn fishr_penalty(g: &mut Graph, variances: &[Var]) -> Var {
    let vbar = mean_of(g, variances);
    let dev: Vec<Var> = variances.iter().map(|&v| sq_dist(g, v, vbar)).collect();
    mean_of(g, &dev)
}

/// `T·ln((1/S) Σ_d exp(r_d/T)) − mean_d r_d`, evaluated with a max shift.
pub fn urm_penalty(g: &mut Graph, risks: &[Var], temperature: f64) -> Var {
    let v = g.stack(risks);
    let m = g.value(v).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = g.scale(v, 1.0 / temperature);
    let shifted = g.add_scalar(s, -m / temperature);
    let e = g.exp(shifted);
    let mean_e = g.mean_all(e);
    let lme = g.ln(mean_e);
    let soft = g.scale(lme, temperature);
    let soft = g.add_scalar(soft, m);
    let mean_r = g.mean_all(v);
    g.sub(soft, mean_r)
}

/// Per source domain, the mean over present classes of the mean squared difference
/// between class means of `local` and `global` rows; averaged over domains.
pub fn lag_alignment(g: &mut Graph, local: Var, global: Var, labels: &[usize], spans: &[(usize, usize)]) -> Var {
    let mut per_domain = Vec::with_capacity(spans.len());
    for &(s, e) in spans {
        let mut classes: Vec<usize> = labels[s..e].to_vec();
        classes.sort_unstable();
        classes.dedup();
        let terms: Vec<Var> = classes
            .iter()
            .map(|&c| {
                let rows: Vec<usize> = (s..e).filter(|&i| labels[i] == c).collect();
                let l = g.gather_rows(local, &rows);
                let lm = g.mean_rows(l);
                let gl = g.gather_rows(global, &rows);
                let gm = g.mean_rows(gl);
                let d = g.sub(lm, gm);
                let sq = g.square(d);
                g.mean_all(sq)
            })
            .collect();
        per_domain.push(mean_of(g, &terms));
    }
    mean_of(g, &per_domain)
}

fn mean_row_sq_dist(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    let per_row = g.sum_cols(sq);
    g.mean_all(per_row)
}

/// Agreement of each view with the original embedding minus the mean pairwise
/// distance between distinct views.
pub fn ddlearn_penalty(g: &mut Graph, original: Var, views: &[Var]) -> Var {
    let agree: Vec<Var> = views.iter().map(|&v| mean_row_sq_dist(g, v, original)).collect();
    let agreement = mean_of(g, &agree);
    let spread = pair_mean(g, views, mean_row_sq_dist);
    g.sub(agreement, spread)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::matrix(v.len(), 1, v.to_vec()))
    }

    fn scalars(g: &mut Graph, v: &[f64]) -> Vec<Var> {
        v.iter().map(|&x| g.constant(Tensor::scalar(x))).collect()
    }

    #[test]
    fn coral_hand_values() {
        let mut g = Graph::new();
        // variance 1 and variance 4, both zero mean
        let a = col(&mut g, &[-1.0, 1.0, -1.0, 1.0]);
        let b = col(&mut g, &[-2.0, 2.0, -2.0, 2.0]);
        let scale: f64 = 3.0 / 4.0;
        let a = g.scale(a, scale.sqrt());
        let b = g.scale(b, scale.sqrt());
        let p = coral_penalty(&mut g, &[a, b]);
        assert!((g.scalar(p) - 9.0).abs() < 1e-12);

        let mut g = Graph::new();
        let a = col(&mut g, &[-1.0, 1.0]);
        let b = col(&mut g, &[0.0, 2.0]);
        let a = g.scale(a, 0.5f64.sqrt());
        let b0 = g.scale(b, 0.5f64.sqrt());
        let b = g.add_scalar(b0, 1.0 - 0.5f64.sqrt());
        let p = coral_penalty(&mut g, &[a, b]);
        assert!((g.scalar(p) - 1.0).abs() < 1e-12, "{}", g.scalar(p));
    }

    #[test]
    fn mmd_singletons_one_bandwidth() {
        let mut g = Graph::new();
        let a = col(&mut g, &[0.0]);
        let b = col(&mut g, &[1.0]);
        let p = mmd_penalty(&mut g, &[a, b], &[1.0]);
        assert!((g.scalar(p) - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        let q = mmd_penalty(&mut g, &[b, a], &[1.0]);
        assert_eq!(g.scalar(p), g.scalar(q));
    }

    #[test]
    fn variance_and_fishr_examples() {
        let mut g = Graph::new();
        let r = scalars(&mut g, &[0.2, 0.4]);
        let v = variance_penalty(&mut g, &r);
        assert!((g.scalar(v) - 0.01).abs() < 1e-12);

        let v = scalars(&mut g, &[1.0, 3.0]);
        let p = fishr_penalty(&mut g, &v);
        assert!((g.scalar(p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn urm_equal_risks_and_cold_limit() {
        let mut g = Graph::new();
        let r = scalars(&mut g, &[0.7, 0.7, 0.7]);
        let p = urm_penalty(&mut g, &r, 1.0);
        assert!(g.scalar(p).abs() < 1e-12);
        let r = scalars(&mut g, &[0.1, 0.5, 0.9]);
        let p = urm_penalty(&mut g, &r, 1e-3);
        assert!((g.scalar(p) - (0.9 - 0.5)).abs() < 2e-3);
    }

    #[test]
    fn lag_single_class_two_domains() {
        let mut g = Graph::new();
        let local = col(&mut g, &[0.0, 0.0, 2.0, 2.0]);
        let global = col(&mut g, &[1.0, 1.0, 1.0, 1.0]);
        let p = lag_alignment(&mut g, local, global, &[0, 0, 0, 0], &[(0, 2), (2, 4)]);
        assert!((g.scalar(p) - 1.0).abs() < 1e-12);
        let q = lag_alignment(&mut g, local, local, &[0, 0, 0, 0], &[(0, 2), (2, 4)]);
        assert_eq!(g.scalar(q), 0.0);
    }

    #[test]
    fn ddlearn_identical_view_is_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let p = ddlearn_penalty(&mut g, z, &[z]);
        assert_eq!(g.scalar(p), 0.0);
    }
}
