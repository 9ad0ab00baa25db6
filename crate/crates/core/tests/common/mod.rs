//! Finite-difference checks shared by the test targets.
#![allow(dead_code)]

use finde_core::finde::ProjectionConfig;
use finde_core::integrators::graph_step::GraphScheme;
use finde_core::models::{Arch, BaseSpec, Model, ModelSpec};
use finde_core::tensor::{Graph, SpdOptions, Tensor, Var};
use finde_core::training::{self, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Scalar probe `sum(op(inputs) * weights)` evaluated on fresh constants.
fn probe(build: &Build, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars);
    assert_eq!(g.shape(y), weights.shape());
    g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Compares the graph adjoint of every input with central differences and
/// returns the worst normwise relative error.
pub fn adjoint_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &vars);
    let n = g.value(y).numel();
    let weights = Tensor::new(
        g.shape(y).to_vec(),
        (0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect(),
    )
    .unwrap();
    let w = g.constant(weights.clone());
    let s = g.dot(y, w).unwrap();
    let grads = g.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, out) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *out = (probe(build, &plus, &weights) - probe(build, &minus, &weights)) / (2.0 * H);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        worst = worst.max(diff / scale);
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// `R R^T + I` for a random `R`.
pub fn spd(r: &Tensor) -> Tensor {
    let n = r.shape()[0];
    let d = r.data();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| d[i * n + k] * d[j * n + k]).sum::<f64>();
        }
        a[i * n + i] += 1.0;
    }
    Tensor::new(vec![n, n], a).unwrap()
}

/// Moves `b` away from `a` wherever they are closer than `0.01`, keeping
/// the slope off its fallback branch.
pub fn separated(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(
        b.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| if (x - y).abs() < 1e-2 { y + 0.1 } else { *y })
            .collect(),
    )
    .unwrap()
}

/// One probe per graph op, with random inputs.
pub fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Box<Build>, Vec<Tensor>)> {
    let mut t = |shape: &[usize]| random_tensor(rng, shape);
    let (a23, b23, c3, d3) = (t(&[2, 3]), t(&[2, 3]), t(&[3]), t(&[3]));
    let (m34, m42) = (t(&[3, 4]), t(&[4, 2]));
    let (bm, bn) = (t(&[2, 3, 4]), t(&[2, 4, 2]));
    let (x243, s6a, s6b) = (t(&[2, 4, 3]), t(&[6]), t(&[6]));
    let (cx, cw, cb) = (t(&[2, 2, 5]), t(&[3, 2, 3]), t(&[3]));
    let (r33, rhs) = (t(&[3, 3]), t(&[3, 2]));
    let s6b = separated(&s6a, &s6b);
    vec![
        (
            "matmul",
            Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap()),
            vec![m34, m42],
        ),
        (
            "batched matmul",
            Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap()),
            vec![bm, bn],
        ),
        (
            "add",
            Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]).unwrap()),
            vec![a23.clone(), b23.clone()],
        ),
        (
            "sub",
            Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]).unwrap()),
            vec![a23.clone(), b23.clone()],
        ),
        (
            "mul",
            Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]).unwrap()),
            vec![a23.clone(), b23.clone()],
        ),
        (
            "tanh slope",
            Box::new(|g: &mut Graph, v: &[Var]| g.tanh_slope(v[0], v[1]).unwrap()),
            vec![s6a, s6b],
        ),
        (
            "add bias",
            Box::new(|g: &mut Graph, v: &[Var]| g.add_bias(v[0], v[1]).unwrap()),
            vec![a23.clone(), c3],
        ),
        (
            "scale",
            Box::new(|g: &mut Graph, v: &[Var]| g.scale(v[0], -1.7).unwrap()),
            vec![a23.clone()],
        ),
        (
            "tanh",
            Box::new(|g: &mut Graph, v: &[Var]| g.tanh(v[0]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "tanh deriv",
            Box::new(|g: &mut Graph, v: &[Var]| g.tanh_deriv(v[0]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "square",
            Box::new(|g: &mut Graph, v: &[Var]| g.square(v[0]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "sum",
            Box::new(|g: &mut Graph, v: &[Var]| g.sum(v[0]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "dot",
            Box::new(|g: &mut Graph, v: &[Var]| g.dot(v[0], v[1]).unwrap()),
            vec![a23.clone(), b23.clone()],
        ),
        (
            "sum last",
            Box::new(|g: &mut Graph, v: &[Var]| g.sum_last(v[0]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "repeat last",
            Box::new(|g: &mut Graph, v: &[Var]| g.repeat_last(v[0], 3).unwrap()),
            vec![a23.clone()],
        ),
        (
            "diag",
            Box::new(|g: &mut Graph, v: &[Var]| g.diag(v[0]).unwrap()),
            vec![d3.clone()],
        ),
        (
            "scale columns",
            Box::new(|g: &mut Graph, v: &[Var]| g.scale_columns(v[0], v[1]).unwrap()),
            vec![x243, d3],
        ),
        (
            "tile",
            Box::new(|g: &mut Graph, v: &[Var]| g.tile(v[0], 2).unwrap()),
            vec![a23.clone()],
        ),
        (
            "reshape",
            Box::new(|g: &mut Graph, v: &[Var]| g.reshape(v[0], &[3, 2]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "transpose",
            Box::new(|g: &mut Graph, v: &[Var]| g.transpose(v[0]).unwrap()),
            vec![a23.clone()],
        ),
        (
            "concat rows",
            Box::new(|g: &mut Graph, v: &[Var]| g.concat(v[0], v[1], 0).unwrap()),
            vec![a23.clone(), b23.clone()],
        ),
        (
            "concat columns",
            Box::new(|g: &mut Graph, v: &[Var]| g.concat(v[0], v[1], 1).unwrap()),
            vec![a23.clone(), b23],
        ),
        (
            "slice",
            Box::new(|g: &mut Graph, v: &[Var]| g.slice(v[0], 1, 1, 2).unwrap()),
            vec![a23],
        ),
        (
            "conv1d",
            Box::new(|g: &mut Graph, v: &[Var]| g.conv1d(v[0], v[1], Some(v[2])).unwrap()),
            vec![cx.clone(), cw.clone(), cb],
        ),
        (
            "conv1d no bias",
            Box::new(|g: &mut Graph, v: &[Var]| g.conv1d(v[0], v[1], None).unwrap()),
            vec![cx.clone(), cw.clone()],
        ),
        (
            "conv adjoint weight",
            Box::new(|g: &mut Graph, v: &[Var]| g.conv_adjoint_weight(v[0]).unwrap()),
            vec![cw],
        ),
        (
            "solve spd",
            Box::new(|g: &mut Graph, v: &[Var]| g.solve_spd(v[0], v[1], &SpdOptions::default()).unwrap()),
            vec![spd(&r33), rhs],
        ),
    ]
}

/// Two-state model with hidden width 8 and random biases.
pub fn tiny_model(base: BaseSpec, k: usize, seed: u64) -> Model {
    let mut m = Model::new(ModelSpec {
        n_state: 2,
        base,
        arch: Arch::mlp(&[8, 8]),
        k,
        bank_arch: Some(Arch::mlp(&[8])),
        analytic: Vec::new(),
        seed,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for i in 0..m.params.len() {
        if m.params.name(i).ends_with("bias") {
            for b in m.params.get_mut(i).data_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn random_pairs(batch: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<f64> = (0..2 * batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let next = gt.iter().map(|x| 0.98 * x + rng.random_range(-0.01..0.01)).collect();
    (gt, next)
}

/// Normwise relative error of the loss gradient against central differences
/// over every parameter scalar.
pub fn loss_gradient_error(model: &Model, mode: Mode, scheme: GraphScheme) -> f64 {
    let (gt, next) = random_pairs(5, 3);
    let cfg = ProjectionConfig::default();
    let dt = 0.1;
    let (_, grads) = training::batch_loss(model, &gt, &next, dt, mode, scheme, &cfg).unwrap();
    let mut m = model.clone();
    let (mut num, mut diff) = (0.0, 0.0);
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = m.params.get(i).data()[j];
            let h = 1e-5 * orig.abs().max(1.0);
            let mut at = |x: f64| {
                m.params.get_mut(i).data_mut()[j] = x;
                training::batch_loss(&m, &gt, &next, dt, mode, scheme, &cfg).unwrap().0
            };
            let fd = (at(orig + h) - at(orig - h)) / (2.0 * h);
            at(orig);
            num += fd * fd;
            diff += (fd - g[j]) * (fd - g[j]);
        }
    }
    (diff / num.max(1e-300)).sqrt()
}
