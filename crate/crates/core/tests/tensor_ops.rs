mod common;

use common::{bilinear_closed_form, naive_conv, random_tensor, rel_err, rng};
use hrgnet::tensor::{BnConfig, Graph, Mode, NodeId, RunningStats, Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> hrgnet::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let wn = g.input(w.clone());
    let bn = g.input(Tensor::new(Shape::new(1, b.len(), 1, 1), b.to_vec())?);
    let y = g.conv2d(xn, wn, bn, stride, pad)?;
    Ok(g.take_value(y))
}

fn upsample(x: &Tensor<f64>, scale: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let y = g.upsample(xn, scale).unwrap();
    g.take_value(y)
}

#[test]
fn conv_zero_input_gives_zero() {
    let mut r = rng(1);
    let x = Tensor::zeros(Shape::new(1, 2, 5, 5));
    let w = random_tensor(Shape::new(3, 2, 3, 3), &mut r);
    let y = conv(&x, &w, &[0.0; 3], 1, 1).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_unit_1x1_is_identity() {
    let mut r = rng(2);
    let x = random_tensor(Shape::new(2, 1, 4, 6), &mut r);
    let y = conv(&x, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0), &[0.0], 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_spec_case_matches_naive() {
    let mut r = rng(3);
    let x = random_tensor(Shape::new(1, 2, 5, 5), &mut r);
    let w = random_tensor(Shape::new(3, 2, 3, 3), &mut r);
    let b = [0.1, -0.2, 0.3];
    let y = conv(&x, &w, &b, 2, 1).unwrap();
    let want = naive_conv(&x, &w, &b, 2, 1);
    assert_eq!(y.shape(), Shape::new(1, 3, 3, 3));
    assert!(y.max_abs_diff(&want) < 1e-6);
}

#[test]
fn conv_matches_naive_over_stride_and_padding() {
    let mut r = rng(4);
    for stride in [1, 2] {
        for pad in [0, 1] {
            for k in [1, 3] {
                for _ in 0..5 {
                    let n = r.random_range(1..=2);
                    let cin = r.random_range(1..=4);
                    let cout = r.random_range(1..=4);
                    let h = r.random_range(k..=9);
                    let wd = r.random_range(k..=9);
                    let x = random_tensor(Shape::new(n, cin, h, wd), &mut r);
                    let w = random_tensor(Shape::new(cout, cin, k, k), &mut r);
                    let b: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
                    let y = conv(&x, &w, &b, stride, pad).unwrap();
                    let want = naive_conv(&x, &w, &b, stride, pad);
                    assert_eq!(y.shape(), want.shape());
                    assert!(y.max_abs_diff(&want) <= 1e-6, "s{stride} p{pad} k{k} {}", x.shape());
                }
            }
        }
    }
}

#[test]
fn conv_f32_agrees_with_f64_oracle() {
    let mut r = rng(5);
    let x = random_tensor(Shape::new(2, 4, 9, 9), &mut r);
    let w = random_tensor(Shape::new(4, 4, 3, 3), &mut r);
    let b = [0.0, 0.5, -0.5, 1.0];
    let want = naive_conv(&x, &w, &b, 1, 1);
    let mut g = Graph::<f32>::new();
    let xn = g.input(x.cast());
    let wn = g.input(w.cast());
    let bn = g.input(Tensor::new(Shape::new(1, 4, 1, 1), b.iter().map(|v| *v as f32).collect()).unwrap());
    let y = g.conv2d(xn, wn, bn, 1, 1).unwrap();
    assert!(g.value(y).cast::<f64>().max_abs_diff(&want) < 1e-5);
}

#[test]
fn conv_channel_mismatch_names_both_shapes() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 2, 5, 5));
    let w = Tensor::zeros(Shape::new(3, 4, 3, 3));
    let msg = conv(&x, &w, &[0.0; 3], 1, 1).unwrap_err().to_string();
    assert!(msg.contains("(1,2,5,5)") && msg.contains("(3,4,3,3)"), "{msg}");
}

#[test]
fn conv_empty_output_rejected() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
    let w = Tensor::zeros(Shape::new(1, 1, 3, 3));
    assert!(conv(&x, &w, &[0.0], 1, 0).is_err());
}

#[test]
fn bilinear_spec_case() {
    let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = upsample(&x, 2);
    assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
    assert_eq!([y.at(0, 0, 0, 0), y.at(0, 0, 0, 3), y.at(0, 0, 3, 0), y.at(0, 0, 3, 3)], [0.0, 1.0, 2.0, 3.0]);
    // on this map f(x, y) = x/3 + 2y/3 exactly
    for i in 0..4 {
        for j in 0..4 {
            let want = j as f64 / 3.0 + 2.0 * i as f64 / 3.0;
            assert!((y.at(0, 0, i, j) - want).abs() <= 1e-6);
        }
    }
}

#[test]
fn bilinear_matches_closed_form() {
    let mut r = rng(6);
    for scale in [2, 4, 8] {
        let x = random_tensor(Shape::new(2, 3, 5, 4), &mut r);
        assert!(upsample(&x, scale).max_abs_diff(&bilinear_closed_form(&x, scale)) <= 1e-6);
    }
}

#[test]
fn bilinear_identity_and_constant() {
    let mut r = rng(7);
    let x = random_tensor(Shape::new(1, 2, 3, 3), &mut r);
    assert_eq!(upsample(&x, 1), x);
    let c = Tensor::full(Shape::new(1, 2, 3, 5), 0.4375);
    assert!(upsample(&c, 4).data().iter().all(|v| *v == 0.4375));
}

fn bn(x: &Tensor<f64>, gamma: f64, beta: f64, stats: &mut RunningStats<f64>, mode: Mode) -> hrgnet::Result<Tensor<f64>> {
    let c = x.shape().c();
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let gn = g.input(Tensor::full(Shape::new(1, c, 1, 1), gamma));
    let bn = g.input(Tensor::full(Shape::new(1, c, 1, 1), beta));
    let y = g.batchnorm2d(xn, gn, bn, stats, BnConfig::default(), mode)?;
    Ok(g.take_value(y))
}

fn channel_moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
    let v: Vec<f64> = (0..t.shape().n()).flat_map(|n| t.plane(n, c).to_vec()).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
}

#[test]
fn batchnorm_train_normalizes() {
    let mut r = rng(8);
    let x = Tensor::from_fn(Shape::new(3, 2, 4, 5), |[_, c, _, _]| r.random_range(-2.0..5.0) * (c + 1) as f64);
    let y = bn(&x, 1.0, 0.0, &mut RunningStats::new(2), Mode::Train).unwrap();
    for c in 0..2 {
        let (m, v) = channel_moments(&y, c);
        assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4, "c{c}: {m} {v}");
    }
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let mut r = rng(9);
    let x = random_tensor(Shape::new(2, 3, 3, 3), &mut r);
    let y = bn(&x, 0.0, 0.25, &mut RunningStats::new(3), Mode::Train).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.25));
}

#[test]
fn batchnorm_running_stat_update_and_eval_agree() {
    let mut r = rng(10);
    let x = random_tensor(Shape::new(4, 2, 3, 3), &mut r);
    let mut stats = RunningStats::new(2);
    let train = bn(&x, 1.5, -0.5, &mut stats, Mode::Train).unwrap();
    let mut exact = RunningStats::new(2);
    for c in 0..2 {
        let (m, v) = channel_moments(&x, c);
        assert!((stats.mean[c] - 0.1 * m).abs() < 1e-12);
        assert!((stats.var[c] - (0.9 + 0.1 * v)).abs() < 1e-12);
        exact.mean[c] = m;
        exact.var[c] = v;
    }
    let eval = bn(&x, 1.5, -0.5, &mut exact, Mode::Eval).unwrap();
    assert!(eval.max_abs_diff(&train) < 1e-5);
}

#[test]
fn batchnorm_eval_needs_initialized_stats() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
    assert!(bn(&x, 1.0, 0.0, &mut RunningStats::uninitialized(2), Mode::Eval).is_err());
}

#[test]
fn relu_add_concat_basics() {
    let s = Shape::new(1, 2, 4, 4);
    let mut g = Graph::<f64>::new();
    let neg = g.input(Tensor::full(s, -3.0));
    let r = g.relu(neg);
    assert!(g.value(r).data().iter().all(|v| *v == 0.0));
    let mut rr = rng(11);
    let x = random_tensor(s, &mut rr);
    let xn = g.input(x.clone());
    let z = g.input(Tensor::zeros(s));
    let a = g.add(xn, z).unwrap();
    assert_eq!(g.value(a), &x);
    let y = g.input(random_tensor(Shape::new(1, 3, 4, 4), &mut rr));
    let cat = g.concat(&[xn, y]).unwrap();
    let out = g.value(cat).clone();
    assert_eq!(out.shape(), Shape::new(1, 5, 4, 4));
    assert_eq!(out.plane(0, 1), x.plane(0, 1));
    assert_eq!(out.plane(0, 2), g.value(y).plane(0, 0));
    let bad = g.input(Tensor::zeros(Shape::new(1, 2, 4, 5)));
    assert!(g.add(xn, bad).is_err());
    assert!(g.concat(&[xn, bad]).is_err());
}

/// Central differences of a scalar function of one leaf.
fn fd_check(x: &Tensor<f64>, probes: usize, step: f64, seed: u64, f: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let xn = g.param("x", x.clone());
    let l = f(&mut g, xn);
    let grad = g.backward(l).unwrap().get("x").unwrap().clone();
    let eval = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let xn = g.param("x", t);
        let l = f(&mut g, xn);
        g.value(l).data()[0]
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = r.random_range(0..x.numel());
        let mut up = x.clone();
        up.data_mut()[i] += step;
        let mut down = x.clone();
        down.data_mut()[i] -= step;
        let numeric = (eval(up) - eval(down)) / (2.0 * step);
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    worst
}

#[test]
fn conv_bn_relu_chain_matches_finite_differences() {
    let mut r = rng(12);
    let w = random_tensor(Shape::new(3, 2, 3, 3), &mut r);
    let b = Tensor::new(Shape::new(1, 3, 1, 1), vec![0.1, 0.0, -0.1]).unwrap();
    let target = random_tensor(Shape::new(2, 3, 5, 5), &mut r);
    let chain = |g: &mut Graph<f64>, x: NodeId| {
        let wn = g.input(w.clone());
        let bn_ = g.input(b.clone());
        let y = g.conv2d(x, wn, bn_, 1, 1).unwrap();
        let gm = g.input(Tensor::full(Shape::new(1, 3, 1, 1), 1.2));
        let bt = g.input(Tensor::full(Shape::new(1, 3, 1, 1), 0.1));
        let mut st = RunningStats::new(3);
        let y = g.batchnorm2d(y, gm, bt, &mut st, BnConfig::default(), Mode::Train).unwrap();
        let y = g.relu(y);
        let t = g.input(target.clone());
        g.mse(y, t).unwrap()
    };
    let x = random_tensor(Shape::new(2, 2, 5, 5), &mut r);
    let err = fd_check(&x, 24, 1e-3, 13, &chain);
    assert!(err < 1e-3, "{err}");
}

fn compose(ops: &[u8], g: &mut Graph<f64>, x: NodeId, w: &Tensor<f64>) -> NodeId {
    let mut y = x;
    for op in ops {
        y = match op {
            0 => g.sigmoid(y),
            1 => g.tanh(y),
            2 => g.upsample(y, 2).unwrap(),
            3 => {
                let c = g.shape(y).c();
                let wn = g.input(w.clone());
                let b = g.input(Tensor::zeros(Shape::new(1, c, 1, 1)));
                g.conv2d(y, wn, b, 1, 1).unwrap()
            }
            _ => g.add(y, x).unwrap_or(y),
        };
    }
    let s = g.sum(y);
    let m = g.mean(y);
    let sq = g.squared_error(y, y, 1.0).unwrap();
    let a = g.add(s, m).unwrap();
    g.add(a, sq).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_three_op_compositions_match_finite_differences(ops in proptest::collection::vec(0u8..5, 3), seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_tensor(Shape::new(1, 2, 4, 4), &mut r);
        let w = random_tensor(Shape::new(2, 2, 3, 3), &mut r);
        let f = |g: &mut Graph<f64>, xn: NodeId| compose(&ops, g, xn, &w);
        let err = fd_check(&x, 20, 1e-5, seed, &f);
        prop_assert!(err < 1e-3, "{:?}: {}", ops, err);
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let mut r = rng(14);
    let x = random_tensor(Shape::new(2, 4, 9, 9), &mut r).cast::<f32>();
    let w = random_tensor(Shape::new(4, 4, 3, 3), &mut r).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xn = g.input(x.clone());
        let wn = g.input(w.clone());
        let b = g.input(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = g.conv2d(xn, wn, b, 2, 1).unwrap();
        let y = g.upsample(y, 2).unwrap();
        g.take_value(y)
    };
    assert_eq!(run().data(), run().data());
}
