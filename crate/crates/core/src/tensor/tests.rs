use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let x = g.constant(t(&[3, 1], &[0.3, -1.2, 4.0]));
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.forward(y).data(), &[0.3, -1.2, 4.0]);
}

#[test]
fn tanh_at_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.tanh(x).unwrap();
    assert_eq!(g.forward(y).item(), 0.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 1.0);
}

#[test]
fn solve_diagonal_systems() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[4.0, 6.0]));
    let x = g.solve_spd(a, b, &SpdOptions::default()).unwrap();
    assert_eq!(g.value(x).data(), &[2.0, 3.0]);

    let a = g.constant(t(&[2, 2], &[4.0, 0.0, 0.0, 9.0]));
    let b = g.constant(t(&[2, 1], &[8.0, 27.0]));
    let x = g.solve_spd(a, b, &SpdOptions::default()).unwrap();
    assert_eq!(g.value(x).data(), &[2.0, 3.0]);

    let a = g.constant(Tensor::identity(3));
    let rhs = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = g.constant(rhs.clone());
    let x = g.solve_spd(a, b, &SpdOptions::default()).unwrap();
    assert_eq!(g.value(x), &rhs);
}

#[test]
fn solve_residual_is_small() {
    let mut g = Graph::new();
    let a_data = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
    let a = g.constant(t(&[3, 3], &a_data));
    let b = g.constant(t(&[3, 1], &[1.0, -2.0, 0.5]));
    let x = g.solve_spd(a, b, &SpdOptions::default()).unwrap();
    let ax = g.matmul(a, x).unwrap();
    let r = g.sub(ax, b).unwrap();
    assert!(g.value(r).norm() <= 1e-10 * g.value(b).norm());
}

#[test]
fn solve_rejects_singular_and_ill_conditioned() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 1]));
    let b = g.constant(Tensor::full(&[1, 1], 1.0));
    let err = g.solve_spd(a, b, &SpdOptions::default()).unwrap_err();
    assert!(matches!(err, Error::SingularProjection { .. }));

    let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1e-14]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let err = g.solve_spd(a, b, &SpdOptions::default()).unwrap_err();
    assert!(matches!(err, Error::SingularProjection { condition } if condition > 1e12));

    // jitter regularises the same system
    let opts = SpdOptions {
        jitter: 1e-6,
        ..SpdOptions::default()
    };
    assert!(g.solve_spd(a, b, &opts).is_ok());
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape error, got {:?}", other.map(|v| v.id())),
    }
}

#[test]
fn backward_requires_scalar_seed() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(a), Err(Error::NonScalarSeed { .. })));
}

#[test]
fn sum_of_weight_times_vector() {
    // d/dW sum(W x) for x = (1, 0): column 0 is all ones, column 1 zero.
    let mut g = Graph::new();
    let w = g.param(0, std::sync::Arc::new(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])));
    let x = g.constant(t(&[2, 1], &[1.0, 0.0]));
    let y = g.matmul(w, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let gw = g.param_grad(0).unwrap();
    assert_eq!(gw.shape(), &[3, 2]);
    assert_eq!(gw.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let w = g.param(7, std::sync::Arc::new(Tensor::vector(vec![1.0, 2.0])));
    let s = g.dot(w, w).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.param_grad(7).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.param_grad(7).is_none());
}

#[test]
fn finite_checks_are_opt_in() {
    let mut g = Graph::with_finite_checks();
    let a = g.constant(Tensor::vector(vec![f64::MAX]));
    assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { .. })));
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![f64::MAX]));
    assert!(g.scale(a, 10.0).is_ok());
}

#[test]
fn tanh_slope_fallback_and_chain_rule() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.7]));
    let b = g.constant(Tensor::vector(vec![0.3, 0.5, 2.0 + 1e-9, -0.2]));
    let s = g.tanh_slope(a, b).unwrap();
    let sv = g.value(s).data().to_vec();
    let av = g.value(a).data().to_vec();
    let bv = g.value(b).data().to_vec();
    // identical inputs: exactly the derivative
    assert_eq!(sv[0], 1.0 - 0.3f64.tanh().powi(2));
    // fallback branch: derivative at the midpoint
    let mid: f64 = 0.5 * (2.0 + 2.0 + 1e-9);
    assert_eq!(sv[2], 1.0 - mid.tanh().powi(2));
    for i in [1, 3] {
        let lhs = sv[i] * (bv[i] - av[i]);
        let rhs = bv[i].tanh() - av[i].tanh();
        assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON * rhs.abs().max(1.0));
    }
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.1, -0.4, 0.9, 1.3, 0.2, -0.7]));
        let b = g.constant(t(&[3, 2], &[0.5, 0.6, -0.2, 0.1, 0.3, 0.8]));
        let c = g.matmul(a, b).unwrap();
        let d = g.tanh(c).unwrap();
        g.value(d).clone()
    };
    let (x, y) = (build(), build());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn conv_preserves_length() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 1, 10], 1.0));
    let w = g.constant(Tensor::full(&[4, 1, 3], 0.5));
    let bias = g.constant(Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]));
    let y = g.conv1d(x, w, Some(bias)).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 10]);
    assert_eq!(g.value(y).get(&[1, 2, 5]), 3.5);
}

#[test]
fn concat_and_slice_roundtrip() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let a = g.slice(x, 1, 0, 1).unwrap();
    let b = g.slice(x, 1, 1, 3).unwrap();
    assert_eq!(g.value(b).data(), &[2.0, 3.0, 4.0, 6.0, 7.0, 8.0]);
    let y = g.concat(a, b, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));
}
