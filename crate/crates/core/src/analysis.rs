//! Distances between domains computed on normalized raw windows.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::MMD_BANDWIDTHS;
use crate::data::normalize::{normalize, NormalizationMode, NormalizationSpec};
use crate::data::{DomainDataset, SensorWindow};
use crate::error::{HaroodError, Result};

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_SAMPLE_CAP: usize = 1000;

/// How per-coordinate W1 and EMD costs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostAggregation {
    /// Mean over coordinates.
    #[default]
    Normalized,
    /// Sum over coordinates.
    Summed,
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(HaroodError::Analysis("distance needs two non-empty sample sets".into()));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(HaroodError::Analysis("samples must share one non-zero dimension".into()));
    }
    Ok(dim)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], gammas: &[f64]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            let d = sq_dist(x, y);
            total += gammas.iter().map(|g| (-g * d).exp()).sum::<f64>() / gammas.len() as f64;
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Squared biased-estimator MMD with a kernel averaging `exp(−γ‖x−y‖²)` over
/// `gammas`, clipped at 0.
pub fn mmd_distance(a: &[Vec<f64>], b: &[Vec<f64>], gammas: &[f64]) -> Result<f64> {
    check_sets(a, b)?;
    if gammas.is_empty() || gammas.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(HaroodError::Analysis("bandwidths must be positive".into()));
    }
    let v = mean_kernel(a, a, gammas) + mean_kernel(b, b, gammas) - 2.0 * mean_kernel(a, b, gammas);
    Ok(v.max(0.0))
}

/// One-dimensional W1 as the integral of `|F_a − F_b|`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(HaroodError::Analysis("distance needs two non-empty sample sets".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        while i < sa.len() && sa[i] == x {
            i += 1;
        }
        while j < sb.len() && sb[j] == x {
            j += 1;
        }
        prev = x;
    }
    Ok(total)
}

fn column(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    set.iter().map(|x| x[k]).collect()
}

fn aggregate(costs: impl Iterator<Item = f64>, dim: usize, mode: CostAggregation) -> f64 {
    let s: f64 = costs.sum();
    match mode {
        CostAggregation::Normalized => s / dim as f64,
        CostAggregation::Summed => s,
    }
}

/// Per-coordinate W1 combined by `mode`.
pub fn wasserstein1_distance(a: &[Vec<f64>], b: &[Vec<f64>], mode: CostAggregation) -> Result<f64> {
    let dim = check_sets(a, b)?;
    let costs = (0..dim)
        .map(|k| wasserstein1_1d(&column(a, k), &column(b, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(costs.into_iter(), dim, mode))
}

/// EMD between two histograms on a shared uniform grid, as the sum of
/// absolute cumulative differences times the bin width. Both are
/// normalized to unit mass first.
pub fn histogram_emd(p: &[f64], q: &[f64], bin_width: f64) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(HaroodError::Analysis("histograms need the same non-zero bin count".into()));
    }
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    if !(sp > 0.0 && sq > 0.0) {
        return Err(HaroodError::Analysis("histograms need positive mass".into()));
    }
    let mut cum = 0.0;
    let mut total = 0.0;
    for (x, y) in p.iter().zip(q) {
        cum += x / sp - y / sq;
        total += cum.abs();
    }
    Ok(total * bin_width)
}

fn histogram(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let k = if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        h[k] += 1.0;
    }
    h
}

/// Per-coordinate histogram EMD over the joint value range, combined by `mode`.
pub fn emd_distance(a: &[Vec<f64>], b: &[Vec<f64>], bins: usize, mode: CostAggregation) -> Result<f64> {
    let dim = check_sets(a, b)?;
    if bins == 0 {
        return Err(HaroodError::Analysis("EMD needs at least one bin".into()));
    }
    let mut costs = Vec::with_capacity(dim);
    for k in 0..dim {
        let (ca, cb) = (column(a, k), column(b, k));
        let lo = ca.iter().chain(&cb).copied().fold(f64::INFINITY, f64::min);
        let hi = ca.iter().chain(&cb).copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        costs.push(histogram_emd(
            &histogram(&ca, lo, width, bins),
            &histogram(&cb, lo, width, bins),
            width,
        )?);
    }
    Ok(aggregate(costs.into_iter(), dim, mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceOptions {
    /// Applied to the pooled windows of all domains before measuring.
    pub normalization: NormalizationSpec,
    pub sample_cap: usize,
    pub seed: u64,
    pub bandwidths: Vec<f64>,
    pub bins: usize,
    pub aggregation: CostAggregation,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            normalization: NormalizationSpec::default(),
            sample_cap: DEFAULT_SAMPLE_CAP,
            seed: 0,
            bandwidths: MMD_BANDWIDTHS.to_vec(),
            bins: DEFAULT_BINS,
            aggregation: CostAggregation::Normalized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub mmd: f64,
    pub w1: f64,
    pub emd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    #[serde(flatten)]
    pub distances: Distances,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub scenario: String,
    pub normalization: NormalizationSpec,
    pub aggregation: CostAggregation,
    pub samples_per_domain: Vec<usize>,
    pub pairs: Vec<PairDistance>,
    pub average: Distances,
}

pub fn pair_distances(a: &[Vec<f64>], b: &[Vec<f64>], opts: &DistanceOptions) -> Result<Distances> {
    Ok(Distances {
        mmd: mmd_distance(a, b, &opts.bandwidths)?,
        w1: wasserstein1_distance(a, b, opts.aggregation)?,
        emd: emd_distance(a, b, opts.bins, opts.aggregation)?,
    })
}

fn flatten_windows(windows: &[SensorWindow]) -> Vec<Vec<f64>> {
    windows.iter().map(|w| w.values().to_vec()).collect()
}

/// All unordered domain pairs after pooled normalization and seeded
/// subsampling of at most `sample_cap` windows per domain.
pub fn pairwise_domain_distances(
    scenario: &str,
    domains: &[DomainDataset],
    opts: &DistanceOptions,
) -> Result<DistanceReport> {
    if domains.len() < 2 {
        return Err(HaroodError::Analysis("pairwise distances need at least two domains".into()));
    }
    if opts.sample_cap == 0 {
        return Err(HaroodError::Analysis("sample cap must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sampled: Vec<Vec<SensorWindow>> = domains
        .iter()
        .map(|d| {
            let n = d.len();
            let k = n.min(opts.sample_cap);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| d.windows()[i].clone()).collect()
        })
        .collect();
    let sets: Vec<Vec<Vec<f64>>> = if opts.normalization.mode == NormalizationMode::None {
        sampled.iter().map(|w| flatten_windows(w)).collect()
    } else {
        let pooled: Vec<SensorWindow> = sampled.iter().flatten().cloned().collect();
        let normalized = normalize(&pooled, opts.normalization)?.windows;
        let mut out = Vec::with_capacity(sampled.len());
        let mut start = 0;
        for s in &sampled {
            out.push(flatten_windows(&normalized[start..start + s.len()]));
            start += s.len();
        }
        out
    };

    let pairs: Vec<(usize, usize)> = (0..sets.len())
        .flat_map(|i| (i + 1..sets.len()).map(move |j| (i, j)))
        .collect();
    let measure = |&(a, b): &(usize, usize)| {
        pair_distances(&sets[a], &sets[b], opts).map(|distances| PairDistance { a, b, distances })
    };
    #[cfg(feature = "parallel")]
    let pairs: Vec<PairDistance> = {
        use rayon::prelude::*;
        pairs.par_iter().map(measure).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let pairs: Vec<PairDistance> = pairs.iter().map(measure).collect::<Result<_>>()?;

    let n = pairs.len() as f64;
    let average = Distances {
        mmd: pairs.iter().map(|p| p.distances.mmd).sum::<f64>() / n,
        w1: pairs.iter().map(|p| p.distances.w1).sum::<f64>() / n,
        emd: pairs.iter().map(|p| p.distances.emd).sum::<f64>() / n,
    };
    Ok(DistanceReport {
        scenario: scenario.to_string(),
        normalization: opts.normalization,
        aggregation: opts.aggregation,
        samples_per_domain: sets.iter().map(Vec::len).collect(),
        pairs,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn mmd_singletons() {
        let d = mmd_distance(&pts(&[0.0]), &pts(&[1.0]), &[1.0]).unwrap();
        assert!((d - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        assert!(mmd_distance(&[], &pts(&[1.0]), &[1.0]).is_err());
    }

    #[test]
    fn w1_examples() {
        let d = wasserstein1_distance(&pts(&[0.0, 1.0]), &pts(&[1.0, 2.0]), CostAggregation::Normalized).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // {0} vs {0, 2}: half the mass moves 2
        assert!((wasserstein1_1d(&[0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emd_point_masses() {
        let mut p = vec![0.0; 10];
        let mut q = vec![0.0; 10];
        p[0] = 1.0;
        q[4] = 1.0;
        assert!((histogram_emd(&p, &q, 0.5).unwrap() - 2.0).abs() < 1e-12);
        let one = emd_distance(&pts(&[0.0, 3.0]), &pts(&[5.0]), 1, CostAggregation::Normalized).unwrap();
        assert_eq!(one, 0.0);
    }

    #[test]
    fn summed_mode_scales_with_dim() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let b = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        let n = wasserstein1_distance(&a, &b, CostAggregation::Normalized).unwrap();
        let s = wasserstein1_distance(&a, &b, CostAggregation::Summed).unwrap();
        assert!((s - 2.0 * n).abs() < 1e-12);
    }
}
