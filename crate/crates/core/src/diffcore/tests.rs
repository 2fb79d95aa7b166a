use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn no_inputs() -> HashMap<String, Tensor> {
    HashMap::new()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn finite_difference_check(graph: &mut Graph, params: &ParamStore) -> (f64, usize) {
    let r = super::gradcheck::check_gradients(graph, &no_inputs(), params, 1e-4).unwrap();
    (r.worst_relative_error, r.skipped)
}

/// Reduces an arbitrary node to a scalar through a fixed random weighting,
/// so every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, params: &mut ParamStore, rng: &mut ChaCha8Rng, x: NodeId) -> NodeId {
    let shape = g.shape(x).to_vec();
    let w = g.param("__probe", &shape, false).unwrap();
    params.insert("__probe", random_tensor(rng, &shape));
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

fn check_op(seeds: u64, build: impl Fn(&mut Graph, &mut ParamStore, &mut ChaCha8Rng) -> NodeId) {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let mut params = ParamStore::new();
        let out = build(&mut g, &mut params, &mut rng);
        let scalar = weighted_sum(&mut g, &mut params, &mut rng, out);
        g.set_output(scalar);
        let (err, skipped) = finite_difference_check(&mut g, &params);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        assert!(skipped <= 2, "seed {seed}: {skipped} kink crossings");
    }
}

fn p(g: &mut Graph, params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
    params.insert(name, random_tensor(rng, shape));
    g.param(name, shape, true).unwrap()
}

#[test]
fn affine_identity_passthrough() {
    let mut g = Graph::new();
    let x = g.input("x", &[2]).unwrap();
    let w = g.param("w", &[2, 2], true).unwrap();
    let b = g.param("b", &[2], true).unwrap();
    g.affine(x, w, b).unwrap();
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    params.insert("b", Tensor::zeros(&[2]));
    let inputs = HashMap::from([("x".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
    assert_eq!(g.forward(&inputs, &params).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn relu_forward() {
    let mut g = Graph::new();
    let x = g.input("x", &[3]).unwrap();
    g.relu(x);
    let inputs = HashMap::from([("x".to_string(), Tensor::vector(vec![-1.0, 0.0, 2.0]))]);
    assert_eq!(g.forward(&inputs, &ParamStore::new()).unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_ones_kernel_constant_input() {
    let mut g = Graph::new();
    let x = g.input("x", &[1, 5, 5]).unwrap();
    let w = g.param("w", &[1, 1, 3, 3], false).unwrap();
    let b = g.param("b", &[1], false).unwrap();
    g.conv2d(x, w, b, 1, 0).unwrap();
    let mut params = ParamStore::new();
    params.insert("w", Tensor::full(&[1, 1, 3, 3], 1.0));
    params.insert("b", Tensor::zeros(&[1]));
    let inputs = HashMap::from([("x".to_string(), Tensor::full(&[1, 5, 5], 1.0))]);
    let out = g.forward(&inputs, &params).unwrap();
    assert_eq!(out.shape(), &[1, 3, 3]);
    assert!(out.data().iter().all(|&v| v == 9.0));
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param("x", &[1], true).unwrap();
    g.mul(x, x).unwrap();
    let mut params = ParamStore::new();
    params.insert("x", Tensor::scalar(3.0));
    assert_eq!(g.forward(&no_inputs(), &params).unwrap().item(), 9.0);
    let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads["x"].item(), 6.0);
}

#[test]
fn linear_sum_gradient() {
    let mut g = Graph::new();
    let w = g.param("w", &[2], true).unwrap();
    let x = g.input("x", &[2]).unwrap();
    let m = g.mul(w, x).unwrap();
    g.sum(m);
    let mut params = ParamStore::new();
    params.insert("w", Tensor::vector(vec![1.0, 1.0]));
    let inputs = HashMap::from([("x".to_string(), Tensor::vector(vec![2.0, 5.0]))]);
    assert_eq!(g.forward(&inputs, &params).unwrap().item(), 7.0);
    let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads["w"].data(), &[2.0, 5.0]);
    assert!(!grads.contains_key("x"));
}

#[test]
fn non_trainable_params_get_no_gradient() {
    let mut g = Graph::new();
    let a = g.param("a", &[1], true).unwrap();
    let b = g.param("b", &[1], false).unwrap();
    g.mul(a, b).unwrap();
    let mut params = ParamStore::new();
    params.insert("a", Tensor::scalar(2.0));
    params.insert("b", Tensor::scalar(4.0));
    g.forward(&no_inputs(), &params).unwrap();
    let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads["a"].item(), 4.0);
}

#[test]
fn backward_before_forward_is_state_error() {
    let mut g = Graph::new();
    let x = g.param("x", &[1], true).unwrap();
    g.relu(x);
    let err = g.backward(&Tensor::scalar(1.0)).unwrap_err();
    assert!(matches!(err, crate::Error::State(_)), "{err}");
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::new();
    let x = g.input("frame", &[3, 8, 8]).unwrap();
    let w = g.param("w", &[4, 2, 3, 3], true).unwrap();
    let b = g.param("b", &[4], true).unwrap();
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("conv2d"), "{err}");

    let mut g = Graph::new();
    let x = g.input("frame", &[2]).unwrap();
    g.relu(x);
    let inputs = HashMap::from([("frame".to_string(), Tensor::vector(vec![1.0, 2.0, 3.0]))]);
    let err = g.forward(&inputs, &ParamStore::new()).unwrap_err();
    assert!(err.to_string().contains("'frame'"), "{err}");

    let mut g = Graph::new();
    let w = g.param("w", &[2], true).unwrap();
    g.relu(w);
    let mut params = ParamStore::new();
    params.insert("w", Tensor::vector(vec![1.0]));
    let err = g.forward(&no_inputs(), &params).unwrap_err();
    assert!(err.to_string().contains("'w'"), "{err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let mut params = ParamStore::new();
    let x = p(&mut g, &mut params, &mut rng, "x", &[2, 9, 9]);
    let w = p(&mut g, &mut params, &mut rng, "w", &[3, 2, 3, 3]);
    let b = p(&mut g, &mut params, &mut rng, "b", &[3]);
    let c = g.conv2d(x, w, b, 2, 1).unwrap();
    let r = g.relu(c);
    g.spatial_mean(r).unwrap();
    let a = g.forward(&no_inputs(), &params).unwrap();
    let bb = g.forward(&no_inputs(), &params).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&bb));
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamStore::new();
    params.insert("w", random_tensor(&mut rng, &[4, 3]));
    params.insert("b", random_tensor(&mut rng, &[3]));
    params.insert("x", random_tensor(&mut rng, &[4]));

    let build = |which: u8| {
        let mut g = Graph::new();
        let x = g.param("x", &[4], true).unwrap();
        let w = g.param("w", &[4, 3], true).unwrap();
        let b = g.param("b", &[3], true).unwrap();
        let y = g.affine(x, w, b).unwrap();
        let r = g.relu(y);
        let l1 = g.sum(r);
        let sq = g.mul(y, y).unwrap();
        let l2 = g.mean(sq);
        match which {
            1 => g.set_output(l1),
            2 => g.set_output(l2),
            _ => {
                let s = g.add(l1, l2).unwrap();
                g.set_output(s);
            }
        }
        g
    };
    let grads = |which| {
        let mut g = build(which);
        g.forward(&no_inputs(), &params).unwrap();
        g.backward(&Tensor::scalar(1.0)).unwrap()
    };
    let (g1, g2, g12) = (grads(1), grads(2), grads(0));
    for name in ["x", "w", "b"] {
        for ((a, b), c) in g1[name].data().iter().zip(g2[name].data()).zip(g12[name].data()) {
            assert!((a + b - c).abs() <= 1e-12 * (1.0 + c.abs()), "{name}: {a}+{b} vs {c}");
        }
    }
}

#[test]
fn fd_conv2d_relu() {
    check_op(20, |g, params, rng| {
        let x = p(g, params, rng, "x", &[2, 7, 6]);
        let w = p(g, params, rng, "w", &[3, 2, 3, 3]);
        let b = p(g, params, rng, "b", &[3]);
        let c = g.conv2d(x, w, b, 2, 1).unwrap();
        g.relu(c)
    });
}

#[test]
fn fd_conv2d_no_padding() {
    check_op(20, |g, params, rng| {
        let x = p(g, params, rng, "x", &[1, 6, 6]);
        let w = p(g, params, rng, "w", &[2, 1, 3, 3]);
        let b = p(g, params, rng, "b", &[2]);
        g.conv2d(x, w, b, 1, 0).unwrap()
    });
}

#[test]
fn fd_affine() {
    check_op(20, |g, params, rng| {
        let x = p(g, params, rng, "x", &[5]);
        let w = p(g, params, rng, "w", &[5, 4]);
        let b = p(g, params, rng, "b", &[4]);
        g.affine(x, w, b).unwrap()
    });
}

#[test]
fn fd_channel_statistics() {
    check_op(20, |g, params, rng| {
        let x = p(g, params, rng, "x", &[3, 4, 5]);
        let y = p(g, params, rng, "y", &[3, 4, 5]);
        let m = g.spatial_mean(x).unwrap();
        let v = g.channel_variance(x).unwrap();
        let c = g.channel_covariance(x, y).unwrap();
        g.concat(&[m, v, c]).unwrap()
    });
}

#[test]
fn fd_elementwise_with_channel_broadcast() {
    check_op(20, |g, params, rng| {
        let a = p(g, params, rng, "a", &[3, 2, 2]);
        let b = p(g, params, rng, "b", &[3]);
        let d = p(g, params, rng, "d", &[3, 2, 2]);
        let s = g.add(a, b).unwrap();
        let m = g.mul(s, b).unwrap();
        let t = g.sub(m, d).unwrap();
        // keep the divisor away from zero
        let bsq = g.mul(b, b).unwrap();
        let den = g.add_scalar(bsq, 0.5);
        let q = g.div(t, den).unwrap();
        let e = g.mul_scalar(q, -1.5);
        let dd = g.mul(d, d).unwrap();
        let den2 = g.add_scalar(dd, 1.0);
        g.div(e, den2).unwrap()
    });
}

#[test]
fn fd_reductions_and_concat() {
    check_op(20, |g, params, rng| {
        let a = p(g, params, rng, "a", &[4]);
        let b = p(g, params, rng, "b", &[2, 3]);
        let s = g.sum(b);
        let m = g.mean(a);
        let sq = g.mul(a, a).unwrap();
        g.concat(&[s, m, sq]).unwrap()
    });
}
