use harood_core::algorithms::{
    and_mask, coral_penalty, dro_reweight, fishr_penalty, lag_alignment, mmd_penalty, variance_penalty,
};
use harood_core::analysis::{
    emd_distance, mmd_distance, wasserstein1_1d, wasserstein1_distance, CostAggregation,
};
use harood_core::data::synthetic::{make_synthetic_suite, SyntheticShiftSpec};
use harood_core::data::window::downsample_indices;
use harood_core::data::normalize::minmax_normalize;
use harood_core::data::{
    downsample, normalize, sliding_window, NormalizationMode, NormalizationSpec, SensorWindow, StatisticsScope,
    WindowingSpec,
};
use harood_core::eval::fractional_ranks;
use harood_core::nn::graph::Graph;
use harood_core::nn::tensor::Tensor;
use proptest::prelude::*;

fn stream_strategy() -> impl Strategy<Value = (Vec<f64>, usize, usize, usize)> {
    (1usize..4, 1usize..20, 1usize..10, 0usize..60).prop_flat_map(|(c, t, step, extra)| {
        let len = t + extra;
        (proptest::collection::vec(-100.0f64..100.0, len * c), Just(c), Just(t), Just(step))
    })
}

fn windows_from(values: Vec<Vec<f64>>, channels: usize) -> Vec<SensorWindow> {
    values
        .into_iter()
        .map(|v| {
            let len = v.len() / channels;
            SensorWindow::new(v, channels, len, 0, 0, 0).unwrap()
        })
        .collect()
}

fn window_set() -> impl Strategy<Value = Vec<SensorWindow>> {
    (1usize..4, 2usize..12, 1usize..6).prop_flat_map(|(c, t, n)| {
        proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, c * t), n)
            .prop_map(move |v| windows_from(v, c))
    })
}

fn point_set(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, dim), 2..12)
}

proptest! {
    #[test]
    fn window_count_law((stream, c, t, step) in stream_strategy()) {
        let spec = WindowingSpec::new(t, step, c).unwrap();
        let len = stream.len() / c;
        let w = sliding_window(&stream, &spec, 0, 0).unwrap();
        prop_assert_eq!(w.len(), (len - t) / step + 1);
        for (k, win) in w.iter().enumerate() {
            prop_assert_eq!(win.timestamp_index, k * step);
            prop_assert_eq!(win.shape(), [c, 1, t]);
            for ch in 0..c {
                for i in 0..t {
                    prop_assert_eq!(win.channel(ch)[i], stream[(k * step + i) * c + ch]);
                }
            }
        }
    }

    #[test]
    fn windows_never_cross_a_seam((a, c, t, step) in stream_strategy(), extra in 0usize..30) {
        let b: Vec<f64> = (0..(t + extra) * c).map(|i| 1000.0 + i as f64).collect();
        let spec = WindowingSpec::new(t, step, c).unwrap();
        let separate = sliding_window(&a, &spec, 0, 0).unwrap().len() + sliding_window(&b, &spec, 0, 0).unwrap().len();
        let first = sliding_window(&a, &spec, 0, 0).unwrap();
        prop_assert!(first.iter().all(|w| w.values().iter().all(|&v| v < 1000.0)));
        prop_assert_eq!(separate, spec.count(a.len() / c) + spec.count(b.len() / c));
    }

    #[test]
    fn minmax_round_trip(windows in window_set(), per_channel in any::<bool>()) {
        let scope = if per_channel { StatisticsScope::PerChannel } else { StatisticsScope::GlobalOverAllSamples };
        let out = minmax_normalize(&windows, scope).unwrap();
        for (orig, norm) in windows.iter().zip(&out.windows) {
            prop_assert!(norm.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let back = out.normalizer.invert(norm).unwrap();
            for (x, y) in orig.values().iter().zip(back.values()) {
                if out.warnings.is_empty() {
                    prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{} vs {}", x, y);
                }
            }
        }
    }

    #[test]
    fn zscore_statistics(windows in window_set()) {
        let spec = NormalizationSpec::new(NormalizationMode::ZScore, StatisticsScope::GlobalOverAllSamples);
        let out = normalize(&windows, spec).unwrap();
        let all: Vec<f64> = out.windows.iter().flat_map(|w| w.values().to_vec()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if out.warnings.is_empty() {
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var.sqrt() - 1.0).abs() <= 1e-6);
        } else {
            prop_assert!(all.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn downsample_is_monotone_and_exact(length in 1usize..400, frac in 0.0f64..=1.0) {
        let target = ((length as f64 * frac).round() as usize).clamp(1, length);
        let idx = downsample_indices(length, target).unwrap();
        prop_assert_eq!(idx.len(), target);
        prop_assert_eq!(idx[0], 0);
        if target > 1 {
            prop_assert_eq!(*idx.last().unwrap(), length - 1);
        }
        prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        let ramp: Vec<f64> = (0..length).map(|i| i as f64).collect();
        let w = SensorWindow::new(ramp, 1, length, 0, 0, 0).unwrap();
        let d = downsample(&w, target).unwrap();
        prop_assert_eq!(d.length(), target);
        prop_assert!(d.values().iter().zip(&idx).all(|(&v, &i)| v == i as f64));
    }

    #[test]
    fn synthetic_suite_is_deterministic(seed in any::<u64>(), domains in 2usize..5, classes in 1usize..5) {
        let spec = SyntheticShiftSpec {
            domain_count: domains,
            class_count: classes,
            samples_per_class_per_domain: 3,
            length: 16,
            seed,
            ..Default::default()
        };
        let a = make_synthetic_suite(&spec).unwrap();
        let b = make_synthetic_suite(&spec).unwrap();
        prop_assert_eq!(a.len(), domains);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.windows(), y.windows());
            prop_assert!(x.class_histogram().iter().all(|&n| n == 3));
        }
    }

    #[test]
    fn penalties_are_nonnegative(a in point_set(3), b in point_set(3), risks in proptest::collection::vec(0.0f64..5.0, 2..6)) {
        let mut g = Graph::new();
        let fa = g.constant(Tensor::matrix(a.len(), 3, a.concat()));
        let fb = g.constant(Tensor::matrix(b.len(), 3, b.concat()));
        let coral = coral_penalty(&mut g, &[fa, fb]);
        let mmd = mmd_penalty(&mut g, &[fa, fb], &[0.1, 1.0, 10.0]);
        let r: Vec<_> = risks.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let var = variance_penalty(&mut g, &r);
        let va = g.constant(Tensor::vector(a[0].clone()));
        let vb = g.constant(Tensor::vector(b[0].clone()));
        let fishr = fishr_penalty(&mut g, &[va, vb]);
        for (name, v) in [("CORAL", coral), ("MMD", mmd), ("VREx", var), ("Fishr", fishr)] {
            prop_assert!(g.scalar(v) >= -1e-12, "{} = {}", name, g.scalar(v));
        }
        let same = coral_penalty(&mut g, &[fa, fa]);
        prop_assert!(g.scalar(same).abs() <= 1e-12);
    }

    #[test]
    fn lag_alignment_is_nonnegative(local in point_set(2), shift in -2.0f64..2.0) {
        let n = local.len();
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(n, 2, local.concat()));
        let gl = g.constant(Tensor::matrix(n, 2, local.concat().iter().map(|v| v + shift).collect()));
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let spans = [(0, n / 2), (n / 2, n)];
        let p = lag_alignment(&mut g, l, gl, &labels, &spans);
        prop_assert!(g.scalar(p) >= 0.0);
    }

    #[test]
    fn dro_weights_stay_a_distribution(risks in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 3), 1..20), eta in 0.0f64..2.0) {
        let mut w = vec![1.0 / 3.0; 3];
        for r in &risks {
            w = dro_reweight(&w, r, eta);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn and_mask_keeps_zero_or_mean(grads in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 2..5), tau in 0.0f64..=1.0) {
        let masked = and_mask(&grads, tau);
        for (k, &m) in masked.iter().enumerate() {
            let mean = grads.iter().map(|g| g[k]).sum::<f64>() / grads.len() as f64;
            prop_assert!(m == 0.0 || (m - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn ranks_sum_to_triangular(values in proptest::collection::vec(0usize..5, 1..12)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let r = fractional_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] > v[j] {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn distances_symmetric_and_zero_on_self(a in point_set(2), b in point_set(2), summed in any::<bool>()) {
        let mode = if summed { CostAggregation::Summed } else { CostAggregation::Normalized };
        let gammas = [0.5, 2.0];
        prop_assert!((mmd_distance(&a, &b, &gammas).unwrap() - mmd_distance(&b, &a, &gammas).unwrap()).abs() <= 1e-12);
        prop_assert!((wasserstein1_distance(&a, &b, mode).unwrap() - wasserstein1_distance(&b, &a, mode).unwrap()).abs() <= 1e-12);
        prop_assert!((emd_distance(&a, &b, 20, mode).unwrap() - emd_distance(&b, &a, 20, mode).unwrap()).abs() <= 1e-12);
        prop_assert!(mmd_distance(&a, &a, &gammas).unwrap().abs() <= 1e-9);
        prop_assert!(wasserstein1_distance(&a, &a, mode).unwrap().abs() <= 1e-9);
        prop_assert!(emd_distance(&a, &a, 20, mode).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn w1_of_a_translate_is_the_shift(a in proptest::collection::vec(-5.0f64..5.0, 1..40), c in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().map(|v| v + c).collect();
        prop_assert!((wasserstein1_1d(&a, &b).unwrap() - c.abs()).abs() <= 1e-9);
    }

    #[test]
    fn w1_is_one_lipschitz(a in proptest::collection::vec(-5.0f64..5.0, 1..30), noise in proptest::collection::vec(-0.5f64..0.5, 30)) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let bound = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        prop_assert!(wasserstein1_1d(&a, &b).unwrap() <= bound + 1e-9);
    }

    #[test]
    fn single_bin_emd_is_zero(a in point_set(3), b in point_set(3)) {
        prop_assert_eq!(emd_distance(&a, &b, 1, CostAggregation::Summed).unwrap(), 0.0);
    }
}
