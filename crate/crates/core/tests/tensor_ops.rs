mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volfuse_core::tensor::gradcheck::{gradcheck, gradcheck_random};
use volfuse_core::tensor::{BatchNormStats, BnMode, Graph, ParamStore, Tensor};
use volfuse_core::Error;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn conv_unit_kernel_scales_input() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 2.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3d(x, w, Some(b), 1, 0).unwrap();
    let expect: Vec<f32> = (0..8).map(|v| 2.0 * v as f32).collect();
    assert_eq!(g.value(y).data(), expect.as_slice());
}

#[test]
fn conv_ones_kernel_on_constant_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5, 5], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let b = g.constant(Tensor::full(&[1], 0.5));
    let y = g.conv3d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3, 3]);
    let (naive, _) = oracle::conv3d(&[1.0; 125], [1, 1, 5, 5, 5], &[1.0; 27], 1, 3, &[0.5], 1, 0);
    assert!(naive.iter().all(|&v| v == 27.5));
    assert!(g.value(y).data().iter().all(|&v| v == 27.5));
}

#[test]
fn conv_shape_formula_full_patch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 64, 64, 64]));
    let w = g.constant(Tensor::zeros(&[16, 4, 3, 3, 3]));
    let y = g.conv3d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 16, 64, 64, 64]);
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 6, 6, 6]));
    let w = g.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
    assert!(matches!(g.conv3d(x, w, None, 2, 0), Err(Error::Shape(_))));
    let w3 = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(g.conv3d(x, w3, None, 1, 1).is_err());
}

#[test]
fn deconv_doubles_and_zero_weights_give_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[1, 2, 8, 8, 8], 1.0));
    let w = g.constant(Tensor::zeros(&[2, 3, 4, 4, 4]));
    let b = g.constant(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = g.deconv3d(x, w, Some(b), 2, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 3, 16, 16, 16]);
    let vol = 16 * 16 * 16;
    for (c, bias) in [0.5, -1.0, 2.0].into_iter().enumerate() {
        assert!(out.data()[c * vol..(c + 1) * vol].iter().all(|&v| v == bias));
    }
}

#[test]
fn deconv_input_gradient_is_forward_conv() {
    // d/dx <deconv(x, w), r> = conv(r, w) with roles flipped: checked by
    // finite differences on a 2^3 probe.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = t(&[1, 1, 4, 4, 4], rand_vec(&mut rng, 64));
    let r = t(&[1, 1, 4, 4, 4], rand_vec(&mut rng, 64));
    let x = t(&[1, 1, 2, 2, 2], rand_vec(&mut rng, 8));
    let rep = gradcheck(
        |g, v| {
            let w = g.constant(w.clone());
            let r = g.constant(r.clone());
            let y = g.deconv3d(v[0], w, None, 2, 1)?;
            let p = g.mul(y, r)?;
            Ok(g.sum(p))
        },
        std::slice::from_ref(&x),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");

    let mut g = Graph::<f64>::new();
    let rv = g.constant(r.clone());
    let wv = g.constant(w.clone());
    let cx = g.conv3d(rv, wv, None, 2, 1).unwrap();
    let mut g2 = Graph::<f64>::new();
    let xv = g2.input(x.clone());
    let wv2 = g2.constant(w);
    let rv2 = g2.constant(r);
    let y = g2.deconv3d(xv, wv2, None, 2, 1).unwrap();
    let p = g2.mul(y, rv2).unwrap();
    let s = g2.sum(p);
    g2.backward(s).unwrap();
    let diff = oracle::max_abs_diff(g.value(cx).data(), g2.grad(xv).unwrap());
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 1, 2, 2, 2], (1..=8).map(f64::from).collect()));
    let y = g.maxpool3d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[8.0]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 1, 4, 4, 4], 3.0));
    let y = g.maxpool3d(x, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.0));
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(grad.iter().filter(|&&v| v != 0.0).count(), 8);
    // lowest linear index of each window, (0, 0, 0) corner
    for (i, &v) in grad.iter().enumerate() {
        let (w, h, d) = (i % 4, (i / 4) % 4, i / 16);
        assert_eq!(v, if w % 2 == 0 && h % 2 == 0 && d % 2 == 0 { 1.0 } else { 0.0 });
    }

    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 3, 4, 4]));
    assert!(g.maxpool3d(x, 2, 2).is_err());
}

#[test]
fn batchnorm_examples() {
    let n = 2 * 3 * 3 * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = rand_vec(&mut rng, n);
    let mean = raw.iter().sum::<f64>() / n as f64;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let std_in: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();

    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 1, 3, 3, 3], std_in.clone()));
    let gm = g.constant(Tensor::full(&[1], 1.0));
    let bt = g.constant(Tensor::zeros(&[1]));
    let mut stats = BatchNormStats::new(1);
    let y = g.batchnorm(x, gm, bt, &mut stats, BnMode::Train, 1e-5, 0.1).unwrap();
    assert!(oracle::max_abs_diff(g.value(y).data(), &std_in) <= 1e-5);

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 1, 2, 2, 2], 4.0));
    let gm = g.constant(Tensor::full(&[1], 1.5));
    let bt = g.constant(Tensor::full(&[1], 0.25));
    let y = g.batchnorm(x, gm, bt, &mut BatchNormStats::new(1), BnMode::Train, 1e-5, 0.1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-9));

    let shape = [4, 2, 3, 3, 3];
    let data = rand_vec(&mut rng, shape.iter().product());
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&shape, data));
    let gm = g.constant(Tensor::full(&[2], 1.0));
    let bt = g.constant(Tensor::zeros(&[2]));
    let y = g.batchnorm(x, gm, bt, &mut BatchNormStats::new(2), BnMode::Train, 1e-5, 0.1).unwrap();
    let out = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|s| out[(s * 2 + ch) * 27..(s * 2 + ch + 1) * 27].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-3, "mean {m} var {v}");
    }
}

#[test]
fn batchnorm_infer_needs_stats() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
    let gm = g.constant(Tensor::full(&[1], 1.0));
    let bt = g.constant(Tensor::zeros(&[1]));
    let mut stats = BatchNormStats::new(1);
    assert!(matches!(
        g.batchnorm(x, gm, bt, &mut stats, BnMode::Infer, 1e-5, 0.1),
        Err(Error::UninitializedStats(_))
    ));
    stats.assume_identity();
    let y = g.batchnorm(x, gm, bt, &mut stats, BnMode::Infer, 1e-5, 0.1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn running_stats_follow_momentum() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
    let gm = g.constant(Tensor::full(&[1], 1.0));
    let bt = g.constant(Tensor::zeros(&[1]));
    let mut stats = BatchNormStats::new(1);
    g.batchnorm(x, gm, bt, &mut stats, BnMode::Train, 1e-5, 0.1).unwrap();
    // batch mean 2.5, unbiased variance 5/3
    assert!((stats.mean[0] - 0.25).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    assert_eq!(stats.updates, 1);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5; 3]);
    let a = g.add(x, z).unwrap();
    assert_eq!(g.value(a).data(), g.value(x).data());
    let bad = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(x, bad).is_err());
}

#[test]
fn sigmoid_strictly_inside_unit_interval() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(&[4], vec![-200.0, -30.0, 30.0, 200.0]).unwrap());
    let s = g.sigmoid(x);
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn dice_loss_examples() {
    let y = Tensor::from_vec(&[1, 1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let yv = g.constant(y.clone());
    let pv = g.constant(y.clone());
    let l = g.dice_loss(pv, yv, 1.0).unwrap();
    assert!(g.value(l).data()[0] < 1e-3);

    let inv = Tensor::from_vec(&[1, 1, 2, 2, 2], y.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    let pv = g.constant(inv);
    let l = g.dice_loss(pv, yv, 1.0).unwrap();
    // 1 - 1/9
    assert!((g.value(l).data()[0] - 8.0 / 9.0).abs() < 1e-12);

    let pv = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 0.5));
    let l = g.dice_loss(pv, yv, 1.0).unwrap();
    assert!((g.value(l).data()[0] - 4.0 / 9.0).abs() < 1e-12);

    let bad = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 0.5));
    assert!(matches!(g.dice_loss(pv, bad, 1.0), Err(Error::Domain(_))));
}

#[test]
fn backward_examples_and_accumulation() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[2, 1, 1, 1, 2], 3.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn param_grads_flow_to_store() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full(&[1, 1, 1, 1, 1], 2.0)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 1, 1, 3], 1.5));
    let w = g.param(&store, id);
    let y = g.conv3d(x, w, None, 1, 0).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    g.write_param_grads(&mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![4.5]);
}

#[test]
fn gradcheck_conv() {
    let rep = gradcheck_random(
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
            let r = g.relu(y);
            let s = g.mul(r, y)?;
            Ok(g.sum(s))
        },
        &[&[1, 2, 4, 4, 4], &[3, 2, 3, 3, 3], &[3]],
        1,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

fn weighted_sum(g: &mut Graph<f64>, y: volfuse_core::tensor::Var, seed: u64) -> volfuse_core::Result<volfuse_core::tensor::Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(t(&shape, rand_vec(&mut rng, shape.iter().product())));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn gradcheck_strided_conv_and_deconv() {
    let rep = gradcheck_random(
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, y, 3)
        },
        &[&[2, 2, 5, 5, 5], &[2, 2, 3, 3, 3], &[2]],
        2,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    let rep = gradcheck_random(
        |g, v| {
            let y = g.deconv3d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(g, y, 4)
        },
        &[&[2, 2, 2, 3, 2], &[2, 3, 4, 4, 4], &[3]],
        3,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn gradcheck_pool_bn_sigmoid_add() {
    let rep = gradcheck_random(
        |g, v| {
            let y = g.maxpool3d(v[0], 2, 2)?;
            weighted_sum(g, y, 5)
        },
        &[&[2, 2, 4, 4, 4]],
        4,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");

    let rep = gradcheck_random(
        |g, v| {
            let mut stats = BatchNormStats::new(3);
            let y = g.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Train, 1e-5, 0.1)?;
            weighted_sum(g, y, 6)
        },
        &[&[3, 3, 2, 3, 2], &[3], &[3]],
        5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");

    let rep = gradcheck_random(
        |g, v| {
            let mut stats = BatchNormStats::new(2);
            stats.mean = vec![0.3, -0.2];
            stats.var = vec![0.5, 2.0];
            stats.assume_identity();
            let y = g.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Infer, 1e-5, 0.1)?;
            weighted_sum(g, y, 7)
        },
        &[&[2, 2, 2, 2, 2], &[2], &[2]],
        6,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");

    let rep = gradcheck_random(
        |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sigmoid(a);
            weighted_sum(g, s, 8)
        },
        &[&[1, 2, 3, 3, 3], &[1, 2, 3, 3, 3]],
        7,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn gradcheck_relu_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..64)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let rep = gradcheck(
        |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 10)
        },
        &[t(&[1, 1, 4, 4, 4], x)],
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn gradcheck_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y = t(&[2, 1, 3, 3, 3], (0..54).map(|_| rng.gen_range(0..2) as f64).collect());
    let z = t(&[2, 1, 3, 3, 3], rand_vec(&mut rng, 54));
    let rep = gradcheck(
        |g, v| {
            let p = g.sigmoid(v[0]);
            let yv = g.constant(y.clone());
            g.dice_loss(p, yv, 1.0)
        },
        &[z],
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn forward_ops_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for case in 0..120 {
        let n = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let (k, stride, pad): (usize, usize, usize) = [(3, 1, 1), (3, 1, 0), (1, 1, 0), (2, 2, 0), (3, 2, 1)][case % 5];
        // smallest valid extent plus a multiple of the stride
        let base = if stride == 1 { k.saturating_sub(2 * pad).max(1) } else { k - 2 * pad };
        let dims: [usize; 3] = std::array::from_fn(|_| base + stride * rng.gen_range(0..4));
        let xs = [n, cin, dims[0], dims[1], dims[2]];
        let x = rand_vec(&mut rng, xs.iter().product());
        let w = rand_vec(&mut rng, cout * cin * k * k * k);
        let b = rand_vec(&mut rng, cout);
        let (naive, ys) = oracle::conv3d(&x, xs, &w, cout, k, &b, stride, pad);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(t(&xs, x.clone()));
        let wv = g.constant(t(&[cout, cin, k, k, k], w));
        let bv = g.constant(t(&[cout], b));
        let y = g.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), &ys);
        worst = worst.max(oracle::max_abs_diff(g.value(y).data(), &naive));

        let w = rand_vec(&mut rng, cin * cout * 64);
        let b = rand_vec(&mut rng, cout);
        let (naive, ys) = oracle::deconv3d(&x, xs, &w, cout, 4, &b, 2, 1);
        let wv = g.constant(t(&[cin, cout, 4, 4, 4], w));
        let bv = g.constant(t(&[cout], b));
        let y = g.deconv3d(xv, wv, Some(bv), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &ys);
        worst = worst.max(oracle::max_abs_diff(g.value(y).data(), &naive));

        if dims.iter().all(|d| d % 2 == 0) {
            let (naive, _) = oracle::maxpool3d(&x, xs, 2, 2);
            let y = g.maxpool3d(xv, 2, 2).unwrap();
            worst = worst.max(oracle::max_abs_diff(g.value(y).data(), &naive));
        }

        let gamma = rand_vec(&mut rng, cin);
        let beta = rand_vec(&mut rng, cin);
        let naive = oracle::batchnorm_train(&x, xs, &gamma, &beta, 1e-5);
        let gv = g.constant(t(&[cin], gamma));
        let bv = g.constant(t(&[cin], beta));
        let y = g.batchnorm(xv, gv, bv, &mut BatchNormStats::new(cin), BnMode::Train, 1e-5, 0.1).unwrap();
        worst = worst.max(oracle::max_abs_diff(g.value(y).data(), &naive));
        compared += 1;
    }
    assert!(compared >= 100, "{compared}");
    assert!(worst < 1e-9, "{worst}");
}
