use super::*;
use crate::tensor::mlp::ClassWeighting;
use proptest::prelude::{prop_assert, proptest};

fn model(pe: bool, eps_i: f64) -> IfmModel {
    let cfg = IfmConfig {
        dim: 16,
        ffn_ratio: 2,
        classifier_hidden: 8,
        position_encoding: pe,
    };
    IfmModel::new(cfg, eps_i, 5).unwrap()
}

fn sample(seed: u64, n: usize, relevant: impl Fn(usize) -> bool) -> IfmSample {
    let mut rng = Rng::new(seed);
    let positions: Vec<usize> = (0..n).collect();
    IfmSample {
        tokens: Matrix::uniform(n, 16, 1.0, &mut rng),
        labels: positions.iter().map(|&p| relevant(p)).collect(),
        positions,
        rows: 4,
        cols: 4,
        instruction: InstructionSpec::new(vec![1, 20 + (seed % 10) as u32, 40, 60]).unwrap(),
    }
}

#[test]
fn instruction_spec_validation() {
    assert!(InstructionSpec::new(vec![]).is_err());
    assert!(InstructionSpec::new(vec![0; 33]).is_err());
    assert!(InstructionSpec::new(vec![256]).is_err());
    assert_eq!(InstructionSpec::new(vec![3, 255]).unwrap().len(), 2);
}

#[test]
fn fuse_shapes_and_errors() {
    let m = model(true, 0.5);
    let mut rng = Rng::new(0);
    let v = Matrix::uniform(7, 16, 1.0, &mut rng);
    let i = Matrix::uniform(3, 16, 1.0, &mut rng);
    let (vp, ip) = m.fuse(&v, &i, &mut FlopCounter::new()).unwrap();
    assert_eq!(vp.shape(), (7, 16));
    assert_eq!(ip.shape(), (3, 16));
    assert!(m
        .fuse(&v, &Matrix::zeros(0, 16), &mut FlopCounter::new())
        .is_err());
    assert!(m
        .fuse(&v, &Matrix::zeros(2, 8), &mut FlopCounter::new())
        .is_err());
}

#[test]
fn instruction_order_is_invisible_without_position_codes() {
    let spec = InstructionSpec::new(vec![1, 17, 33, 49, 65]).unwrap();
    let rev = InstructionSpec::new(vec![65, 49, 33, 17, 1]).unwrap();
    let s = sample(1, 16, |_| false);
    let fc = &mut FlopCounter::disabled();

    let plain = model(false, 0.5);
    let a = plain.features(s.visual(), &spec, fc).unwrap();
    let b = plain.features(s.visual(), &rev, fc).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);

    let coded = model(true, 0.5);
    let a = coded.features(s.visual(), &spec, fc).unwrap();
    let b = coded.features(s.visual(), &rev, fc).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn untrained_model_scores_half() {
    let m = model(true, 0.5);
    let s = sample(2, 16, |p| p < 4);
    let f = m
        .features(s.visual(), &s.instruction, &mut FlopCounter::disabled())
        .unwrap();
    let scores = m.scores(&f, &mut FlopCounter::disabled()).unwrap();
    assert!(scores.iter().all(|&p| p == 0.5));

    let (x, y) = ifm_training_set(&m, &[s]).unwrap();
    let w = vec![1.0; y.len()];
    let loss = m.classifier.bce_loss(&x, &y, &w).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn threshold_extremes() {
    let s = sample(3, 16, |_| true);
    let fc = &mut FlopCounter::disabled();
    let m = model(true, 0.0);
    let f = m.features(s.visual(), &s.instruction, fc).unwrap();
    let r = m.filter(&f, &s.tokens, &s.positions, fc).unwrap();
    assert_eq!(r.kept_indices, s.positions);
    assert_eq!(r.kept_tokens, s.tokens);

    let m = model(true, 1.0);
    let r = m.filter(&f, &s.tokens, &s.positions, fc).unwrap();
    assert!(r.kept_indices.is_empty());
    assert_eq!(r.relevance_scores.len(), 16);

    assert!(IfmModel::new(IfmConfig::default(), 1.5, 0).is_err());
}

#[test]
fn classifier_only_learns_all_relevant() {
    let m = model(true, 0.5);
    let samples: Vec<_> = (0..16).map(|i| sample(i, 16, |_| true)).collect();
    let cfg = TrainConfig {
        epochs: 50,
        lr: 1e-2,
        batch_size: 64,
        seed: 0,
        weighting: ClassWeighting::Balanced,
    };
    let (trained, curve) = train_ifm(&m, &samples, &cfg, IfmTrainScope::ClassifierOnly).unwrap();
    assert_eq!(curve.len(), 51);
    let (x, _) = ifm_training_set(&trained, &samples).unwrap();
    let p = trained.scores(&x, &mut FlopCounter::disabled()).unwrap();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!(mean > 0.9, "mean score {mean}");
    // Frozen parts are untouched.
    assert_eq!(trained.fusion, m.fusion);
    assert_eq!(trained.embedding, m.embedding);
}

#[test]
fn loss_falls_over_first_epochs() {
    let m = model(true, 0.5);
    // Top row of the grid is relevant: learnable from position codes.
    let samples: Vec<_> = (0..16).map(|i| sample(i + 100, 16, |p| p < 4)).collect();
    for (scope, batch) in [
        (IfmTrainScope::ClassifierOnly, 32),
        (IfmTrainScope::EndToEnd, 4),
    ] {
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: batch,
            ..TrainConfig::default()
        };
        let (_, curve) = train_ifm(&m, &samples, &cfg, scope).unwrap();
        assert!(curve[5] < curve[0], "{scope:?}: {curve:?}");
    }
}

#[test]
fn end_to_end_trains_fusion_not_embedding() {
    let m = model(true, 0.5);
    let samples: Vec<_> = (0..8)
        .map(|i| sample(i + 200, 16, |p| p % 4 == 0))
        .collect();
    let cfg = TrainConfig {
        epochs: 30,
        lr: 3e-3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let (trained, curve) = train_ifm(&m, &samples, &cfg, IfmTrainScope::EndToEnd).unwrap();
    assert_eq!(curve.len(), 31);
    assert!((curve[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(trained.embedding, m.embedding);
    assert_ne!(trained.fusion, m.fusion);
    assert!(ifm_recall(&trained, &samples).unwrap() > 0.9);
    let last = ifm_loss(&trained, &samples, cfg.weighting).unwrap();
    assert!((last - curve[30]).abs() < 1e-12);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let mut m = model(true, 0.5);
    m.classifier = Mlp2::new(16, 8, 1, &mut rng);
    let samples = [sample(21, 16, |p| p % 3 == 0), sample(22, 8, |p| p < 2)];
    let w = ClassWeighting::Balanced;
    let (_, analytic) = ifm_loss_gradients(&m, &samples, w).unwrap();
    let base = m.trainable_params();
    assert_eq!(analytic.len(), base.len());
    let h = 1e-5;
    for i in (0..base.len()).step_by(13) {
        let mut p = base.clone();
        p[i] += h;
        let mut c = m.clone();
        c.set_trainable_params(&p).unwrap();
        let up = ifm_loss(&c, &samples, w).unwrap();
        p[i] -= 2.0 * h;
        c.set_trainable_params(&p).unwrap();
        let down = ifm_loss(&c, &samples, w).unwrap();
        let num = (up - down) / (2.0 * h);
        let err = (num - analytic[i]).abs();
        assert!(
            err < 1e-6 + 1e-4 * num.abs().max(analytic[i].abs()),
            "param {i}: {num} vs {}",
            analytic[i]
        );
    }
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let mut rng = Rng::new(9);
    let mut m = model(true, 0.5);
    m.classifier = Mlp2::new(16, 8, 1, &mut rng);
    let s = sample(4, 16, |p| p % 3 == 0);
    let (x, y) = ifm_training_set(&m, &[s]).unwrap();
    let w = vec![1.0; y.len()];
    let (_, g) = m.classifier.bce_gradients(&x, &y, &w).unwrap();
    let analytic = g.flat();
    let base = m.classifier.flat_params();
    let h = 1e-5;
    for i in (0..base.len()).step_by(7) {
        let mut p = base.clone();
        p[i] += h;
        let mut c = m.classifier.clone();
        c.set_flat_params(&p).unwrap();
        let up = c.bce_loss(&x, &y, &w).unwrap();
        p[i] -= 2.0 * h;
        c.set_flat_params(&p).unwrap();
        let down = c.bce_loss(&x, &y, &w).unwrap();
        let num = (up - down) / (2.0 * h);
        let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
        assert!(rel < 1e-4, "param {i}: {num} vs {}", analytic[i]);
    }
}

#[test]
fn weight_round_trip() {
    let m = model(true, 0.3);
    let back = IfmModel::from_weight_file(
        &WeightFile::from_bytes(&m.to_weight_file().to_bytes()).unwrap(),
        0.3,
    )
    .unwrap();
    assert_eq!(back, m);
    let mut f = m.to_weight_file();
    f.values.pop();
    assert!(IfmModel::from_weight_file(&f, 0.3).is_err());
}

#[test]
fn relevance_pools_to_coarse_grid() {
    let mut mask = vec![false; 16];
    mask[5] = true; // (1, 1)
    mask[15] = true; // (3, 3)
    assert_eq!(
        pool_relevance(&mask, 4, 2).unwrap(),
        vec![true, false, false, true]
    );
    assert!(pool_relevance(&mask, 4, 3).is_err());
}

proptest! {
    #![proptest_config(proptest::test_runner::Config::with_cases(32))]

    #[test]
    fn kept_sets_shrink_with_threshold(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut m = model(true, lo);
        m.classifier = Mlp2::new(16, 8, 1, &mut Rng::new(seed));
        let s = sample(seed, 16, |_| false);
        let fc = &mut FlopCounter::disabled();
        let f = m.features(s.visual(), &s.instruction, fc).unwrap();
        let low = m.filter(&f, &s.tokens, &s.positions, fc).unwrap();
        m.eps_i = hi;
        let high = m.filter(&f, &s.tokens, &s.positions, fc).unwrap();
        prop_assert!(high.kept_indices.iter().all(|i| low.kept_indices.contains(i)));
        prop_assert!(low.kept_indices.windows(2).all(|w| w[0] < w[1]));
        for (k, &p) in low.relevance_scores.iter().enumerate() {
            prop_assert!((p >= lo) == low.kept_indices.contains(&s.positions[k]));
        }
    }
}
