use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tasd_core::segnet::*;
use tasd_core::shape_dictionary::{reference_mask, ShapeCoefficients, ShapeDictionary};
use tasd_diffcore::Grid;

fn dict(k: usize, side: usize, seed: u64) -> ShapeDictionary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = (0..k * side * side).map(|_| rng.random_range(-0.25..0.25)).collect();
    ShapeDictionary::from_atoms(k, side, side, atoms, 0.1).unwrap()
}

fn arch(side: usize, width: usize, k: usize, prior: bool) -> ArchConfig {
    ArchConfig {
        height: side,
        width: side,
        base_width: width,
        depth: 3,
        reg_hidden: 6,
        k,
        use_shape_prior: prior,
        ..Default::default()
    }
}

fn batch(n: usize, side: usize, seed: u64) -> (Grid, Grid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Grid::from_fn(&[n, 1, side, side], |_| rng.sample(StandardNormal));
    let y = Grid::from_fn(&[n, 1, side, side], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    (x, y)
}

fn random_codes(n: usize, k: usize, seed: u64) -> Vec<ShapeCoefficients> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>().into())
        .collect()
}

#[test]
fn build_is_deterministic_with_paper_head_width() {
    let d = dict(48, 64, 0);
    let a = ArchConfig::default();
    let p = SegNetParams::build(&a, Some(&d), 7).unwrap();
    let q = SegNetParams::build(&a, Some(&d), 7).unwrap();
    assert_eq!(p.to_bytes(), q.to_bytes());
    let fc2 = p.group_index("reg.fc2.weight").unwrap();
    assert_eq!(p.group(fc2).shape(), &[48, 64]);
    let r = SegNetParams::build(&a, Some(&d), 8).unwrap();
    assert_ne!(p.checksum(), r.checksum());
}

#[test]
fn reference_equals_dictionary_combination_bitwise() {
    let d = dict(5, 16, 1);
    let p = SegNetParams::build(&arch(16, 2, 5, true), Some(&d), 3).unwrap();
    let (x, _) = batch(3, 16, 2);
    let out = p.forward(Some(&d), &x, None).unwrap();
    let reference = out.reference.as_ref().unwrap();
    for n in 0..3 {
        let direct = reference_mask(&d, &out.sample_coeffs(n).unwrap()).unwrap();
        assert_eq!(&reference.data()[n * 256..(n + 1) * 256], direct.data());
    }
}

#[test]
fn forward_determinism_and_perturbation_activity() {
    let d = dict(5, 16, 1);
    let p = SegNetParams::build(&arch(16, 2, 5, true), Some(&d), 3).unwrap();
    let (x, _) = batch(1, 16, 2);
    assert_eq!(p.forward(Some(&d), &x, None).unwrap(), p.forward(Some(&d), &x, None).unwrap());
    let a = p.forward(Some(&d), &x, Some(&PerturbationConfig::standard(1))).unwrap();
    let b = p.forward(Some(&d), &x, Some(&PerturbationConfig::standard(2))).unwrap();
    assert_ne!(a.seg_logits, b.seg_logits);
    assert_ne!(a.coeffs, b.coeffs);
    let again = p.forward(Some(&d), &x, Some(&PerturbationConfig::standard(1))).unwrap();
    assert_eq!(a, again);
    let bad = PerturbationConfig {
        dropout_rate: 1.0,
        ..PerturbationConfig::standard(0)
    };
    assert!(p.forward(Some(&d), &x, Some(&bad)).is_err());
}

#[test]
fn non_finite_activation_names_the_layer() {
    let d = dict(5, 16, 1);
    let mut p = SegNetParams::build(&arch(16, 2, 5, true), Some(&d), 3).unwrap();
    let g = p.group_index("dec1.conv.weight").unwrap();
    p.group_mut(g).data_mut().iter_mut().for_each(|v| *v = 1e308);
    let (x, _) = batch(1, 16, 2);
    match p.forward(Some(&d), &x, None) {
        Err(SegNetError::Layer { layer, .. }) => assert_eq!(layer, "dec1"),
        other => panic!("expected a layer error, got {other:?}"),
    }
}

#[test]
fn seg_loss_examples() {
    let y = Grid::from_fn(&[1, 1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let saturated = y.map(|v| if v > 0.5 { 40.0 } else { -40.0 });
    assert!(seg_loss(&saturated, &y).unwrap() < 0.01);
    let zero = Grid::zeros(&[1, 1, 4, 4]);
    let sy = y.sum();
    let dice = 1.0 - (2.0 * 0.5 * sy + 1.0) / (0.5 * 16.0 + sy + 1.0);
    let expected = std::f64::consts::LN_2 + dice;
    assert!((seg_loss(&zero, &y).unwrap() - expected).abs() < 1e-14);
    assert!(matches!(seg_loss(&zero, &y.map(|v| v * 2.0)), Err(SegNetError::TargetOutOfRange)));
}

#[test]
fn seg_loss_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.random_range(1..4);
        let logits = Grid::from_fn(&[n, 1, 6, 5], |_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let y = Grid::from_fn(&[n, 1, 6, 5], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
        let per = 30;
        let mut bce = 0.0;
        let mut dice = 0.0;
        for b in 0..n {
            let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
            for i in b * per..(b + 1) * per {
                let z = logits.data()[i];
                let t = y.data()[i];
                let p = 1.0 / (1.0 + (-z).exp());
                bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                inter += p * t;
                sp += p;
                sy += t;
            }
            dice += 1.0 - (2.0 * inter + 1.0) / (sp + sy + 1.0);
        }
        let naive = bce / (n * per) as f64 + dice / n as f64;
        assert!((seg_loss(&logits, &y).unwrap() - naive).abs() <= 1e-10);
    }
}

#[test]
fn regress_loss_examples() {
    let t: ShapeCoefficients = vec![1.0, -2.0, 0.5].into();
    assert!(regress_loss(&t, &t).unwrap().abs() < 1e-15);
    assert_eq!(regress_loss(&vec![1.0, 0.0].into(), &vec![0.0, 3.0].into()).unwrap(), 1.0);
    let neg: ShapeCoefficients = t.values.iter().map(|v| -v).collect::<Vec<_>>().into();
    assert!((regress_loss(&neg, &t).unwrap() - 2.0).abs() < 1e-15);
    assert_eq!(regress_loss(&ShapeCoefficients::zeros(3), &t).unwrap(), 1.0);
    assert!(regress_loss(&vec![1.0].into(), &t).is_err());
}

proptest! {
    #[test]
    fn regress_loss_in_range(a in prop::collection::vec(-1e3..1e3f64, 6), b in prop::collection::vec(-1e3..1e3f64, 6)) {
        let l = regress_loss(&a.into(), &b.into()).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
    }
}

#[test]
fn train_objective_decomposes() {
    let d = dict(4, 16, 2);
    let p = SegNetParams::build(&arch(16, 2, 4, true), Some(&d), 9).unwrap();
    let (x, y) = batch(2, 16, 3);
    let codes = random_codes(2, 4, 5);
    let seg_only = train_objective(&p, Some(&d), &x, &y, &codes, 0.0).unwrap();
    let full = train_objective(&p, Some(&d), &x, &y, &codes, 5.0).unwrap();
    let out = p.forward_with(Some(&d), &x, None, true).unwrap();
    let seg = seg_loss(&out.seg_logits, &y).unwrap();
    let reg = (0..2)
        .map(|n| regress_loss(&out.sample_coeffs(n).unwrap(), &codes[n]).unwrap())
        .sum::<f64>()
        / 2.0;
    assert!((seg_only - seg).abs() <= 1e-12);
    assert!((full - (seg + 5.0 * reg)).abs() <= 1e-12);
    assert!(matches!(
        train_objective(&p, Some(&d), &x, &y, &[], 5.0),
        Err(SegNetError::MissingTarget(_))
    ));
}

#[test]
fn regression_head_receives_gradient() {
    let d = dict(4, 16, 2);
    let p = SegNetParams::build(&arch(16, 2, 4, true), Some(&d), 9).unwrap();
    let (x, y) = batch(2, 16, 3);
    let (_, grads) = train_objective_grad(&p, Some(&d), &x, &y, &random_codes(2, 4, 5), 5.0).unwrap();
    for g in p.regression_groups() {
        let norm = grads.get(tasd_diffcore::ParamId(g)).unwrap().norm();
        assert!(norm > 0.0, "{}", p.group_name(g));
    }
}

/// Central differences over every element of every group; reports the worst group.
fn check_gradients(prior: bool) {
    let k = 8;
    let d = dict(k, 16, 11);
    let a = arch(16, 2, k, prior);
    let p = SegNetParams::build(&a, prior.then_some(&d), 12).unwrap();
    let (x, y) = batch(2, 16, 13);
    let codes = random_codes(2, k, 14);
    let dref = prior.then_some(&d);
    let (_, grads) = train_objective_grad(&p, dref, &x, &y, &codes, 5.0).unwrap();
    let h = 1e-6;
    for g in 0..p.group_count() {
        let analytic = grads.get(tasd_diffcore::ParamId(g)).unwrap();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = p.clone();
            plus.group_mut(g).data_mut()[i] += h;
            let mut minus = p.clone();
            minus.group_mut(g).data_mut()[i] -= h;
            let fp = train_objective(&plus, dref, &x, &y, &codes, 5.0).unwrap();
            let fm = train_objective(&minus, dref, &x, &y, &codes, 5.0).unwrap();
            *slot = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = numeric.iter().zip(analytic.data()).map(|(n, a)| (n - a).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.norm().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        assert!(rel <= 1e-4, "{}: relative error {rel:e} (|g| = {scale:e})", p.group_name(g));
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    check_gradients(true);
}

#[test]
fn baseline_gradients_match_finite_differences() {
    check_gradients(false);
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let d = dict(4, 16, 2);
    let mut p = SegNetParams::build(&arch(16, 2, 4, true), Some(&d), 9).unwrap();
    let before = p.clone();
    let data = vec![TrainingExample {
        image: Grid::zeros(&[16, 16]),
        mask: Grid::zeros(&[16, 16]),
        code: Some(ShapeCoefficients::zeros(4)),
    }];
    let cfg = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let r = train(&mut p, Some(&d), &data, &cfg, |_, _| {}).unwrap();
    assert_eq!(r.steps, 0);
    assert_eq!(p, before);
    let missing = vec![TrainingExample {
        code: None,
        ..data[0].clone()
    }];
    assert!(matches!(
        train(&mut p, Some(&d), &missing, &TrainConfig::default(), |_, _| {}),
        Err(SegNetError::MissingTarget(0))
    ));
}

#[test]
fn short_training_reduces_loss() {
    let d = dict(4, 16, 2);
    let mut p = SegNetParams::build(&arch(16, 4, 4, true), Some(&d), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<TrainingExample> = (0..10)
        .map(|_| {
            let (cy, cx) = (rng.random_range(5..11) as f64, rng.random_range(5..11) as f64);
            let mask = Grid::from_fn(&[16, 16], |i| {
                let (y, x) = ((i / 16) as f64, (i % 16) as f64);
                if (y - cy).powi(2) + (x - cx).powi(2) < 12.0 { 1.0 } else { 0.0 }
            });
            let image = mask.map(|v| v * 2.0 - 1.0);
            TrainingExample {
                code: Some(tasd_core::shape_dictionary::sparse_code(&d, &mask, d.lambda()).unwrap()),
                image,
                mask,
            }
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 8,
        ..Default::default()
    };
    let r = train(&mut p, Some(&d), &data, &cfg, |_, _| {}).unwrap();
    assert_eq!(r.steps, 16);
    assert!(r.epoch_losses.last().unwrap() < r.epoch_losses.first().unwrap(), "{:?}", r.epoch_losses);
    // Running statistics moved away from their initial values.
    assert!(p.running_stats()[0].mean.iter().any(|m| *m != 0.0));
}
