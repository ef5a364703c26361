use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random projection to a scalar so every output element affects the loss.
fn project(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> crate::Result<Var> {
    let t = rand_tensor(g.shape(y), rng);
    let t = g.constant(t);
    let p = g.mul(y, t)?;
    g.sum(p)
}

#[test]
fn identity_kernel_leaves_input_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&[3, 4, 5], &mut rng);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.input("x", x.clone());
    let wv = g.input("w", w);
    let bv = g.input("b", Tensor::zeros(&[3]));
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    // 3x3 centre tap with padding 1 is also the identity
    let mut w3 = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        w3.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let wv = g.input("w3", w3);
    let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn softmax_of_clipped_one_hot_logits() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::new(&[3, 1, 1], vec![0.0, -3.0, -3.0]).unwrap());
    let s = g.softmax_channels(x).unwrap();
    let v = g.value(s).data();
    // e^-3 = 0.049787, denominator 1.099574
    assert!((v[0] - 0.90942).abs() < 1e-4);
    assert!((v[1] - 0.04529).abs() < 1e-4);
    assert!((v[2] - 0.04529).abs() < 1e-4);
}

#[test]
fn leaky_relu_negative_branch() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::from_vec(vec![-1.0, 2.0]));
    let y = g.leaky_relu(x, 0.01).unwrap();
    assert_eq!(g.value(y).data(), &[-0.01, 2.0]);
}

#[test]
fn square_sum_derivative() {
    let (g, out) = Graph::eval(&[("x", Tensor::from_vec(vec![1.0, 2.0]))], |g, v| {
        let sq = g.mul(v["x"], v["x"])?;
        g.sum(sq)
    })
    .unwrap();
    let grads = g.backward(out, None).unwrap();
    assert_eq!(grads.by_name()["x"].data(), &[2.0, 4.0]);
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
    let logits = Tensor::new(&[4, 1, 1], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
    let onehot = Tensor::new(&[4, 1, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let (g, out) = Graph::eval(&[("x", logits.clone())], |g, v| {
        let s = g.softmax_channels(v["x"])?;
        let l = g.log(s)?;
        let t = g.constant(onehot.clone());
        let p = g.mul(l, t)?;
        let s = g.sum(p)?;
        g.scale(s, -1.0)
    })
    .unwrap();
    let grad = g.backward(out, None).unwrap().by_name()["x"].clone();
    let mut p = logits.data().to_vec();
    softmax_channels_inplace(&mut p, 4, 1);
    for k in 0..4 {
        assert!((grad.data()[k] - (p[k] - onehot.data()[k])).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_bad_seed_and_foreign_var() {
    let (g, out) = Graph::eval(&[("x", Tensor::from_vec(vec![1.0, 2.0]))], |g, v| g.scale(v["x"], 3.0)).unwrap();
    assert!(g.backward(out, Some(&Tensor::scalar(1.0))).is_err());
    let other = Graph::new();
    assert!(matches!(other.backward(out, None), Err(crate::Error::NoForward)));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::from_vec(vec![-1.0]));
    assert!(matches!(g.log(x), Err(crate::Error::NonFinite(_))));
}

#[test]
fn eval_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 8, 8], &mut rng);
    let w = rand_tensor(&[4, 2, 3, 3], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.input("x", x.clone());
        let wv = g.input("w", w.clone());
        let bv = g.input("b", Tensor::zeros(&[4]));
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let y = g.instance_norm(y, 1e-5).unwrap();
        let y = g.softmax_channels(y).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    let per_pixel = 4 * 4;
    for px in 0..per_pixel {
        let s: f64 = (0..4).map(|c| a.data()[c * per_pixel + px]).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn max_pool_rejects_odd_extent() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::zeros(&[1, 3, 4]));
    assert!(matches!(g.max_pool2(x), Err(crate::Error::NotPoolable(_))));
}

#[test]
fn unpool_restores_max_locations() {
    let mut g = Graph::new();
    let x = g.input(
        "x",
        Tensor::new(&[1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap(),
    );
    let p = g.max_pool2(x).unwrap();
    assert_eq!(g.value(p).data(), &[5.0]);
    let u = g.max_unpool2(p, p).unwrap();
    assert_eq!(g.value(u).data(), &[0.0, 5.0, 0.0, 0.0]);
}

/// One builder per op kind; each is gradient-checked on random inputs.
pub(crate) fn op_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>)> {
    vec![
        ("conv2d_s1", vec![("x", vec![2, 5, 4]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])]),
        ("conv2d_s2", vec![("x", vec![2, 6, 6]), ("w", vec![3, 2, 3, 3]), ("b", vec![3])]),
        ("conv1x1", vec![("x", vec![3, 3, 3]), ("w", vec![2, 3, 1, 1]), ("b", vec![2])]),
        ("conv_transpose", vec![("x", vec![3, 2, 3]), ("w", vec![3, 2, 2, 2]), ("b", vec![2])]),
        ("max_pool_unpool", vec![("x", vec![2, 4, 4])]),
        ("upsample", vec![("x", vec![2, 2, 3])]),
        ("leaky_relu", vec![("x", vec![2, 3, 3])]),
        ("instance_norm", vec![("x", vec![2, 3, 4])]),
        ("concat", vec![("x", vec![1, 3, 3]), ("y", vec![2, 3, 3])]),
        ("softmax", vec![("x", vec![4, 2, 3])]),
        ("log_exp", vec![("x", vec![2, 2, 2])]),
        ("arith", vec![("x", vec![2, 2, 3]), ("y", vec![2, 2, 3])]),
        ("reductions", vec![("x", vec![3, 2, 2])]),
        ("clip", vec![("x", vec![2, 3, 3])]),
    ]
}

pub(crate) fn build_case(
    name: &str,
    g: &mut Graph,
    v: &std::collections::HashMap<String, Var>,
    rng_seed: u64,
) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let y = match name {
        "conv2d_s1" => g.conv2d(v["x"], v["w"], v["b"], 1, 1)?,
        "conv2d_s2" => g.conv2d(v["x"], v["w"], v["b"], 2, 1)?,
        "conv1x1" => g.conv2d(v["x"], v["w"], v["b"], 1, 0)?,
        "conv_transpose" => g.conv_transpose2x2(v["x"], v["w"], v["b"])?,
        "max_pool_unpool" => {
            let p = g.max_pool2(v["x"])?;
            let q = g.scale(p, 1.5)?;
            let u = g.max_unpool2(q, p)?;
            g.add(u, v["x"])?
        }
        "upsample" => g.upsample_nearest2(v["x"])?,
        "leaky_relu" => g.leaky_relu(v["x"], 0.01)?,
        "instance_norm" => g.instance_norm(v["x"], 1e-5)?,
        "concat" => g.concat(&[v["x"], v["y"]])?,
        "softmax" => g.softmax_channels(v["x"])?,
        "log_exp" => {
            let e = g.exp(v["x"])?;
            let s = g.add_scalar(e, 0.5)?;
            g.log(s)?
        }
        "arith" => {
            let a = g.mul(v["x"], v["y"])?;
            let b = g.sub(a, v["x"])?;
            let e = g.exp(v["y"])?;
            let d = g.div(b, e)?;
            g.add(d, v["y"])?
        }
        "reductions" => {
            let s = g.sum_spatial(v["x"])?;
            let m = g.mean(v["x"])?;
            let s = g.mul(s, s)?;
            let s = g.sum(s)?;
            let m = g.scale(m, 3.0)?;
            let out = g.add(s, m)?;
            return Ok(out);
        }
        "clip" => {
            let c = g.clip(v["x"], -0.5, 0.6)?;
            g.channel_scale(c, vec![0.0, 1.0 / 0.95])?
        }
        other => panic!("unknown case {other}"),
    };
    project(g, y, &mut rng)
}

pub(crate) fn random_inputs(shapes: &[(&'static str, Vec<usize>)], seed: u64) -> Vec<(&'static str, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(n, s)| {
            let mut t = rand_tensor(s, &mut rng);
            // keep kinks (relu at 0, clip bounds, pooling ties) away from the FD stencil
            for v in t.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.01;
                }
                for edge in [-0.5, 0.6] {
                    if (*v - edge).abs() < 1e-3 {
                        *v += 0.01;
                    }
                }
            }
            (*n, t)
        })
        .collect()
}

#[test]
fn every_op_kind_matches_finite_differences() {
    for (name, shapes) in op_cases() {
        for seed in 0..5 {
            let inputs = random_inputs(&shapes, seed);
            let r = grad_check(&inputs, 1e-5, |g, v| build_case(name, g, v, seed + 100)).unwrap();
            assert!(r.passed(), "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn kink_margin_cases() {
    let mut g = Graph::new();
    assert_eq!(g.kink_margin(), f64::INFINITY);
    let x = g.input("x", Tensor::new(&[1, 2, 2], vec![0.3, -0.05, 1.0, 0.9]).unwrap());
    g.leaky_relu(x, 0.01).unwrap();
    assert!((g.kink_margin() - 0.05).abs() < 1e-15);
    g.max_pool2(x).unwrap();
    assert!((g.kink_margin() - 0.05).abs() < 1e-15);
    g.clip(x, -1.0, 0.92).unwrap();
    assert!((g.kink_margin() - 0.02).abs() < 1e-12);
    let y = g.input("y", Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.99, 0.2]).unwrap());
    g.max_pool2(y).unwrap();
    assert!((g.kink_margin() - 0.01).abs() < 1e-12);
}
