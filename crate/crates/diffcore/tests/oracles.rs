//! Naive-loop forward oracles and central-difference gradient checks for every primitive.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tasd_diffcore::{BnMode, DiffError, Grid, ParamId, RunningStats, Tape, BN_EPS};

fn rand_grid(shape: &[usize], rng: &mut ChaCha8Rng) -> Grid {
    Grid::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn naive_conv(x: &Grid, k: &Grid, b: &[f64], stride: usize, pad: usize) -> Grid {
    let (n, c, h, w) = x.dims4().unwrap();
    let (o, _, kh, kw) = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Grid::zeros(&[n, o, oh, ow]);
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += k.data()[((oc * c + ic) * kh + i) * kw + j]
                                    * x.data()[((bn * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[((bn * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Central differences of `f` with respect to every entry of `inputs[which]`.
fn finite_diff(f: &dyn Fn(&[Grid]) -> f64, inputs: &[Grid], which: usize, h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(inputs[which].len());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= h;
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

/// Runs `build` on a fresh tape with every input registered as a trainable parameter,
/// then compares tape gradients with central differences.
fn grad_check(inputs: &[Grid], build: &dyn Fn(&mut Tape, &[tasd_diffcore::Var]) -> tasd_diffcore::Var) -> f64 {
    let eval = |gs: &[Grid]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<_> = gs
            .iter()
            .enumerate()
            .map(|(i, g)| t.param(ParamId(i), g.clone(), true).unwrap())
            .collect();
        let l = build(&mut t, &vars);
        t.value(l).unwrap().data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, g)| t.param(ParamId(i), g.clone(), true).unwrap())
        .collect();
    let l = build(&mut t, &vars);
    let grads = t.backward(l).unwrap();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let fd = finite_diff(&eval, inputs, i, 1e-5);
        let an = grads.get(ParamId(i)).unwrap().data().to_vec();
        worst = worst.max(rel_err(&an, &fd));
    }
    worst
}

#[test]
fn conv_ones_sums_to_nine() {
    let mut t = Tape::new();
    let x = t.input(Grid::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let k = t.input(Grid::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = t.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(t.value(y).unwrap().shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).unwrap().data()[0], 9.0);
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xg = rand_grid(&[2, 1, 5, 4], &mut rng);
    let mut t = Tape::new();
    let x = t.input(xg.clone()).unwrap();
    let k = t.input(Grid::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let b = t.input(Grid::zeros(&[1])).unwrap();
    let y = t.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(t.value(y).unwrap(), &xg);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let xg = rand_grid(&[1, 2, 5, 5], &mut rng);
        let kg = rand_grid(&[3, 2, 3, 3], &mut rng);
        let bg = rand_grid(&[3], &mut rng);
        let mut t = Tape::new();
        let x = t.input(xg.clone()).unwrap();
        let k = t.input(kg.clone()).unwrap();
        let b = t.input(bg.clone()).unwrap();
        let y = t.conv2d(x, k, Some(b), stride, pad).unwrap();
        let want = naive_conv(&xg, &kg, bg.data(), stride, pad);
        assert!(t.value(y).unwrap().max_abs_diff(&want) <= 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.input(Grid::zeros(&[1, 2, 4, 4])).unwrap();
    let k = t.input(Grid::zeros(&[1, 3, 3, 3])).unwrap();
    let err = t.conv2d(x, k, None, 1, 1).unwrap_err();
    match err {
        DiffError::Shape { op, detail } => {
            assert_eq!(op, "conv2d");
            assert!(detail.contains("3 input channels"), "{detail}");
        }
        other => panic!("unexpected {other:?}"),
    }
    let k = t.input(Grid::zeros(&[1, 2, 3, 3])).unwrap();
    assert!(t.conv2d(x, k, None, 0, 1).is_err());
}

fn naive_bn(x: &Grid, scale: &[f64], shift: &[f64], eps: f64) -> Grid {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for ci in 0..c {
        let mut vals = Vec::new();
        for b in 0..n {
            for p in 0..h * w {
                vals.push(x.data()[(b * c + ci) * h * w + p]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for p in 0..h * w {
                let i = (b * c + ci) * h * w + p;
                out.data_mut()[i] = scale[ci] * (x.data()[i] - mean) / (var + eps).sqrt() + shift[ci];
            }
        }
    }
    out
}

#[test]
fn batchnorm_matches_two_pass_oracle_and_updates_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xg = rand_grid(&[3, 4, 5, 5], &mut rng);
    let sg = rand_grid(&[4], &mut rng);
    let hg = rand_grid(&[4], &mut rng);
    let mut rs = RunningStats::new(4);
    let mut t = Tape::new();
    let x = t.input(xg.clone()).unwrap();
    let s = t.input(sg.clone()).unwrap();
    let h = t.input(hg.clone()).unwrap();
    let y = t
        .batchnorm2d(x, s, h, BnMode::Train { running: &mut rs, momentum: 0.1 }, BN_EPS)
        .unwrap();
    let want = naive_bn(&xg, sg.data(), hg.data(), BN_EPS);
    assert!(t.value(y).unwrap().max_abs_diff(&want) <= 1e-10);
    assert!(rs.mean.iter().all(|m| m.abs() < 0.2));
    assert!(rs.mean.iter().any(|&m| m != 0.0));

    // eval mode normalizes by the running statistics
    let y2 = t.batchnorm2d(x, s, h, BnMode::Eval(&rs), BN_EPS).unwrap();
    let v = t.value(y2).unwrap();
    let i = 7;
    let ci = (i / 25) % 4;
    let expect = sg.data()[ci] * (xg.data()[i] - rs.mean[ci]) / (rs.var[ci] + BN_EPS).sqrt() + hg.data()[ci];
    assert!((v.data()[i] - expect).abs() < 1e-12);
}

#[test]
fn batchnorm_standardized_input_passes_through() {
    // two samples per channel: values ±1 have mean 0 and variance 1
    let xg = Grid::new(vec![2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
    let mut t = Tape::new();
    let x = t.input(xg.clone()).unwrap();
    let s = t.input(Grid::full(&[1], 1.0)).unwrap();
    let h = t.input(Grid::zeros(&[1])).unwrap();
    let y = t.batchnorm2d(x, s, h, BnMode::BatchStats, BN_EPS).unwrap();
    assert!(t.value(y).unwrap().max_abs_diff(&xg) < 1e-5);

    let s0 = t.input(Grid::zeros(&[1])).unwrap();
    let h3 = t.input(Grid::full(&[1], 3.0)).unwrap();
    let y0 = t.batchnorm2d(x, s0, h3, BnMode::BatchStats, BN_EPS).unwrap();
    assert!(t.value(y0).unwrap().data().iter().all(|&v| v == 3.0));
}

#[test]
fn batchnorm_rejects_empty_batch_in_train_mode() {
    let mut t = Tape::new();
    let x = t.input(Grid::new(vec![0, 2, 3, 3], vec![]).unwrap()).unwrap();
    let s = t.input(Grid::full(&[2], 1.0)).unwrap();
    let h = t.input(Grid::zeros(&[2])).unwrap();
    let mut rs = RunningStats::new(2);
    let err = t.batchnorm2d(x, s, h, BnMode::Train { running: &mut rs, momentum: 0.1 }, BN_EPS);
    assert!(matches!(err, Err(DiffError::InvalidArgument { .. })));
}

#[test]
fn dropout_modes_and_survival_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xg = rand_grid(&[1, 1, 10, 10], &mut rng);
    let mut t = Tape::new();
    let x = t.input(xg.clone()).unwrap();
    let off = t.dropout(x, 0.5, 1, false).unwrap();
    assert_eq!(t.value(off).unwrap(), &xg);
    let zero_rate = t.dropout(x, 0.0, 1, true).unwrap();
    assert_eq!(t.value(zero_rate).unwrap(), &xg);
    assert!(t.dropout(x, 1.0, 1, true).is_err());

    let ones = t.input(Grid::full(&[1, 1, 100, 1000], 1.0)).unwrap();
    let d = t.dropout(ones, 0.5, 42, true).unwrap();
    let v = t.value(d).unwrap().clone();
    let kept = v.data().iter().filter(|&&a| a != 0.0).count() as f64 / v.len() as f64;
    assert!((kept - 0.5).abs() <= 0.01, "kept {kept}");
    assert!(v.data().iter().all(|&a| a == 0.0 || a == 2.0));
    let again = t.dropout(ones, 0.5, 42, true).unwrap();
    assert_eq!(t.value(again).unwrap(), &v);
}

#[test]
fn pointwise_primitives() {
    let mut t = Tape::new();
    let x = t.input(Grid::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
    let r = t.relu(x).unwrap();
    assert_eq!(t.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
    let z = t.input(Grid::scalar(0.0)).unwrap();
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.value(s).unwrap().data(), &[0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xg = rand_grid(&[2, 3], &mut rng);
    let x = t.input(xg.clone()).unwrap();
    let eye = t.input(Grid::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
    let b = t.input(Grid::zeros(&[3])).unwrap();
    let y = t.dense(x, eye, b).unwrap();
    assert_eq!(t.value(y).unwrap().data(), xg.data());
}

#[test]
fn structural_primitives_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xg = rand_grid(&[2, 3, 4, 6], &mut rng);
    let mut t = Tape::new();
    let x = t.input(xg.clone()).unwrap();

    let p = t.avgpool2d(x, 2).unwrap();
    let pv = t.value(p).unwrap().clone();
    for pc in 0..6 {
        for y in 0..2 {
            for xx in 0..3 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += xg.data()[(pc * 4 + 2 * y + dy) * 6 + 2 * xx + dx];
                    }
                }
                assert!((pv.data()[(pc * 2 + y) * 3 + xx] - s / 4.0).abs() <= 1e-12);
            }
        }
    }
    assert!(t.avgpool2d(x, 5).is_err());

    let u = t.upsample_nearest(p, 2).unwrap();
    let uv = t.value(u).unwrap();
    assert_eq!(uv.shape(), &[2, 3, 4, 6]);
    assert_eq!(uv.data()[(5 * 4 + 3) * 6 + 5], pv.data()[(5 * 2 + 1) * 3 + 2]);

    let c = t.concat_channels(&[x, u]).unwrap();
    let cv = t.value(c).unwrap();
    assert_eq!(cv.shape(), &[2, 6, 4, 6]);
    assert_eq!(cv.data()[(6 + 1) * 24 + 5], xg.data()[(3 + 1) * 24 + 5]);
    let bad = t.input(Grid::zeros(&[2, 1, 3, 6])).unwrap();
    assert!(t.concat_channels(&[x, bad]).is_err());

    let sm = t.softmax_channels(x).unwrap();
    let smv = t.value(sm).unwrap();
    for b in 0..2 {
        for q in 0..24 {
            let s: f64 = (0..3).map(|ci| smv.data()[(b * 3 + ci) * 24 + q]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_simple_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pg = rand_grid(&[5], &mut rng);
    let mut t = Tape::new();
    let p = t.param(ParamId(0), pg.clone(), true).unwrap();
    let q = t.param(ParamId(1), pg.clone(), true).unwrap();
    let sq = t.mul(p, p).unwrap();
    let s = t.sum(sq).unwrap();
    let half = t.scale(s, 0.5).unwrap();
    let g = t.backward(half).unwrap();
    assert!(g.get(ParamId(0)).unwrap().max_abs_diff(&pg) <= 1e-15);
    assert!(g.get(ParamId(1)).unwrap().data().iter().all(|&v| v == 0.0));
    let _ = q;

    let c = t.input(Grid::scalar(3.0)).unwrap();
    let g = t.backward(c).unwrap();
    assert!(g.iter().all(|(_, gr)| gr.data().iter().all(|&v| v == 0.0)));

    assert!(matches!(t.backward(p), Err(DiffError::NonScalarLoss(_))));
    let other = Tape::new();
    assert_eq!(other.backward(half).unwrap_err(), DiffError::ForeignVar);
    assert!(matches!(t.param(ParamId(0), pg, true), Err(DiffError::DuplicateParam(0))));
}

#[test]
fn non_finite_values_are_reported() {
    let mut t = Tape::new();
    let x = t.input(Grid::full(&[1], 1e308)).unwrap();
    let err = t.scale(x, 10.0).unwrap_err();
    assert_eq!(err, DiffError::NonFinite { op: "scale" });
}

#[test]
fn gradients_of_conv_bn_relu_pool_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        rand_grid(&[2, 2, 6, 6], &mut rng),
        rand_grid(&[3, 2, 3, 3], &mut rng),
        rand_grid(&[3], &mut rng),
        rand_grid(&[3], &mut rng),
    ];
    let target = Grid::from_fn(&[2, 3, 3, 3], |i| (i as f64 * 0.37).sin());
    let err = grad_check(&inputs, &|t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 1).unwrap();
        let y = t.batchnorm2d(y, v[2], v[3], BnMode::BatchStats, BN_EPS).unwrap();
        let y = t.relu(y).unwrap();
        let y = t.avgpool2d(y, 2).unwrap();
        let tg = t.input(target.clone()).unwrap();
        t.mean_squared_diff(y, tg).unwrap()
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn gradients_of_strided_conv_eval_bn_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let inputs = vec![
        rand_grid(&[1, 2, 7, 7], &mut rng),
        rand_grid(&[2, 2, 3, 3], &mut rng),
        rand_grid(&[2], &mut rng),
        rand_grid(&[2], &mut rng),
        rand_grid(&[2], &mut rng),
    ];
    let rs = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.5, 0.7],
    };
    let err = grad_check(&inputs, &|t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[4]), 2, 1).unwrap();
        let y = t.batchnorm2d(y, v[2], v[3], BnMode::Eval(&rs), BN_EPS).unwrap();
        let y = t.dropout(y, 0.5, 7, true).unwrap();
        let y = t.sigmoid(y).unwrap();
        let s = t.mul(y, y).unwrap();
        t.sum(s).unwrap()
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn gradients_of_dense_gap_atoms_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let atoms = std::sync::Arc::new(rand_grid(&[4, 3, 3], &mut rng));
    let inputs = vec![
        rand_grid(&[2, 5, 3, 3], &mut rng),
        rand_grid(&[4, 5], &mut rng),
        rand_grid(&[4], &mut rng),
        rand_grid(&[2, 4], &mut rng),
    ];
    let err = grad_check(&inputs, &|t, v| {
        let g = t.global_avg_pool(v[0]).unwrap();
        let a = t.dense(g, v[1], v[2]).unwrap();
        let cos = t.cosine_distance(a, v[3], 1e-8).unwrap();
        let m = t.combine_atoms(a, atoms.clone()).unwrap();
        let sq = t.mul(m, m).unwrap();
        let s = t.sum(sq).unwrap();
        let s = t.scale(s, 0.01).unwrap();
        t.add(cos, s).unwrap()
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn gradients_of_segmentation_losses_and_upsample_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let inputs = vec![rand_grid(&[2, 1, 2, 2], &mut rng), rand_grid(&[2, 1, 4, 4], &mut rng)];
    let target = Grid::from_fn(&[2, 2, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let err = grad_check(&inputs, &|t, v| {
        let u = t.upsample_nearest(v[0], 2).unwrap();
        let c = t.concat_channels(&[u, v[1]]).unwrap();
        let bce = t.bce_with_logits(c, &target).unwrap();
        let p = t.sigmoid(c).unwrap();
        let dice = t.soft_dice_loss(p, &target, 1.0).unwrap();
        let sm = t.softmax_channels(c).unwrap();
        let smv = t.sub(sm, p).unwrap();
        let sq = t.mul(smv, smv).unwrap();
        let sq = t.sum(sq).unwrap();
        let l = t.add(bce, dice).unwrap();
        t.add(l, sq).unwrap()
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn cosine_distance_clamped_branch_gradient() {
    // ‖a‖‖b‖ < eps: denominator is the constant eps
    let inputs = [
        Grid::new(vec![1, 2], vec![1e-5, -2e-5]).unwrap(),
        Grid::new(vec![1, 2], vec![3e-5, 1e-5]).unwrap(),
    ];
    let mut t = Tape::new();
    let a = t.param(ParamId(0), inputs[0].clone(), true).unwrap();
    let b = t.param(ParamId(1), inputs[1].clone(), true).unwrap();
    let l = t.cosine_distance(a, b, 1e-8).unwrap();
    let g = t.backward(l).unwrap();
    let da = g.get(ParamId(0)).unwrap().data();
    assert!((da[0] + 3e-5 / 1e-8).abs() < 1e-6);
    assert!((da[1] + 1e-5 / 1e-8).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_agrees_with_oracle_on_random_geometry(
        seed in 0u64..1000, n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xg = rand_grid(&[n, c, h, w], &mut rng);
        let kg = rand_grid(&[o, c, k, k], &mut rng);
        let bg = rand_grid(&[o], &mut rng);
        let mut t = Tape::new();
        let x = t.input(xg.clone()).unwrap();
        let kv = t.input(kg.clone()).unwrap();
        let b = t.input(bg.clone()).unwrap();
        let y = t.conv2d(x, kv, Some(b), stride, pad).unwrap();
        prop_assert!(t.value(y).unwrap().max_abs_diff(&naive_conv(&xg, &kg, bg.data(), stride, pad)) <= 1e-10);
    }

    #[test]
    fn identical_inputs_give_bit_identical_gradients(seed in 0u64..500) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let x = t.param(ParamId(0), rand_grid(&[1, 2, 6, 6], &mut rng), true).unwrap();
            let k = t.param(ParamId(1), rand_grid(&[2, 2, 3, 3], &mut rng), true).unwrap();
            let y = t.conv2d(x, k, None, 1, 1).unwrap();
            let y = t.dropout(y, 0.5, seed, true).unwrap();
            let y = t.mul(y, y).unwrap();
            let l = t.sum(y).unwrap();
            let g = t.backward(l).unwrap();
            (t.value(l).unwrap().clone(), g.get(ParamId(0)).unwrap().clone(), g.get(ParamId(1)).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
