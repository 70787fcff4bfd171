use harood_core::nn::backbone::{BackboneConfig, Capacity, Family, Mode, ModelBundle};
use harood_core::nn::graph::Graph;
use harood_core::nn::tensor::Tensor;
use harood_core::HaroodError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE_SHAPES: [[usize; 3]; 6] = [[45, 1, 125], [6, 1, 200], [6, 1, 128], [27, 1, 200], [8, 1, 200], [6, 1, 50]];

fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> Tensor {
    let len = n * shape.iter().product::<usize>();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn builder_feature_dim_matches_runtime_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for shape in TABLE_SHAPES {
        for cfg in [BackboneConfig::cnn(shape), BackboneConfig::transformer(shape)] {
            let family = cfg.family;
            let promised = cfg.feature_dim().unwrap();
            let model = ModelBundle::new(cfg, 4, &mut rng).unwrap();
            let f = model.forward_features(&random_batch(&mut rng, 2, shape)).unwrap();
            assert_eq!(f.shape(), &[2, promised], "{family:?} {shape:?}");
            assert!(f.is_finite());
        }
    }
}

#[test]
fn transformer_width_is_tokens_times_model_width() {
    let cfg = BackboneConfig::transformer([8, 1, 200]);
    assert_eq!(cfg.feature_dim().unwrap(), 200 * 16);
}

#[test]
fn parameter_counts_grow_with_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for family in [Family::Cnn, Family::Transformer] {
        let counts: Vec<usize> = [Capacity::Small, Capacity::Mid, Capacity::Large]
            .into_iter()
            .map(|c| {
                let base = match family {
                    Family::Cnn => BackboneConfig::cnn([6, 1, 50]),
                    Family::Transformer => BackboneConfig::transformer([6, 1, 50]),
                };
                ModelBundle::new(base.with_capacity(c), 6, &mut rng).unwrap().parameter_count()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{family:?}: {counts:?}");
    }
}

#[test]
fn zero_features_give_the_classifier_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = ModelBundle::new(BackboneConfig::cnn([6, 1, 50]), 5, &mut rng).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g, &model.params);
    let zeros = g.constant(Tensor::zeros(&[3, model.feature_dim()]));
    let logits = model.classify(&mut g, &p, zeros);
    let (_, b) = model.classifier_slots();
    let bias = model.params.get(b).data();
    for r in 0..3 {
        assert_eq!(g.value(logits).row(r), bias);
    }
}

#[test]
fn eval_mode_is_deterministic_and_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in [BackboneConfig::cnn([6, 1, 50]), BackboneConfig::transformer([6, 1, 50])] {
        let model = ModelBundle::new(cfg, 3, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 8, [6, 1, 50]);
        let a = model.predict_logits(&batch).unwrap();
        assert_eq!(a, model.predict_logits(&batch).unwrap());
        for i in [0, 5] {
            let single = model.predict_logits(&batch.gather_rows(&[i])).unwrap();
            for (x, y) in single.row(0).iter().zip(a.row(i)) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
        let shifted = a.map(|v| v + 3.0);
        assert_eq!(shifted.argmax_rows(), a.argmax_rows());
    }
}

#[test]
fn bad_batches_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = ModelBundle::new(BackboneConfig::cnn([6, 1, 50]), 3, &mut rng).unwrap();
    let mut batch = random_batch(&mut rng, 2, [6, 1, 50]);
    batch.data_mut()[7] = f64::NAN;
    assert!(model.forward_features(&batch).is_err());
    let wrong = random_batch(&mut rng, 2, [5, 1, 50]);
    assert!(matches!(model.forward_features(&wrong), Err(HaroodError::Shape(_))));
    assert!(matches!(BackboneConfig::cnn([6, 1, 2]).feature_dim(), Err(HaroodError::Shape(_))));
}

#[test]
fn transformer_without_positions_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, t) = (3, 12);
    let mut cfg = BackboneConfig::transformer([c, 1, t]);
    cfg.use_positional_encoding = false;
    let d = cfg.model_width();
    let model = ModelBundle::new(cfg, 2, &mut rng).unwrap();
    let x = random_batch(&mut rng, 1, [c, 1, t]);
    let mut perm: Vec<usize> = (0..t).collect();
    perm.reverse();
    perm.swap(2, 7);
    let mut permuted = vec![0.0; c * t];
    for ch in 0..c {
        for (k, &src) in perm.iter().enumerate() {
            permuted[ch * t + k] = x.data()[ch * t + src];
        }
    }
    let xp = Tensor::new(vec![1, c, 1, t], permuted);
    let f = model.forward_features(&x).unwrap();
    let fp = model.forward_features(&xp).unwrap();
    for (k, &src) in perm.iter().enumerate() {
        for j in 0..d {
            let (a, b) = (fp.data()[k * d + j], f.data()[src * d + j]);
            assert!((a - b).abs() <= 1e-10, "token {k} unit {j}: {a} vs {b}");
        }
    }

    let mut with_pe = BackboneConfig::transformer([c, 1, t]);
    with_pe.use_positional_encoding = true;
    let model = ModelBundle::new(with_pe, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let f = model.forward_features(&x).unwrap();
    let fp = model.forward_features(&xp).unwrap();
    let moved = perm
        .iter()
        .enumerate()
        .any(|(k, &src)| (0..d).any(|j| (fp.data()[k * d + j] - f.data()[src * d + j]).abs() > 1e-6));
    assert!(moved, "positional encodings should break equivariance");
}

#[test]
fn attention_rows_are_distributions_on_table_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = ModelBundle::new(BackboneConfig::transformer([6, 1, 50]), 6, &mut rng).unwrap();
    let maps = model.attention_maps(&random_batch(&mut rng, 2, [6, 1, 50])).unwrap();
    assert!(!maps.is_empty());
    for m in maps {
        let k = *m.shape().last().unwrap();
        for row in m.data().chunks(k) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn training_and_eval_modes_share_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = ModelBundle::new(BackboneConfig::cnn([8, 1, 200]), 6, &mut rng).unwrap();
    let batch = random_batch(&mut rng, 4, [8, 1, 200]);
    let mut g = Graph::new();
    let p = model.bind(&mut g, &model.params);
    let x = g.constant(batch);
    let train = model.features(&mut g, &p, x, Mode::Train);
    let eval = model.features(&mut g, &p, x, Mode::Eval);
    assert_eq!(g.value(train.combined).shape(), g.value(eval.combined).shape());
}
