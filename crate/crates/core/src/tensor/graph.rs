//! Dynamic reverse-mode computation graph.
//!
//! Values are computed eagerly when a node is appended, so the graph is a
//! tape of already evaluated nodes. Inputs always precede outputs, which
//! keeps the tape acyclic and makes a single reverse sweep sufficient for
//! [`Graph::backward`].

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Acceptance thresholds for [`Graph::solve_spd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpdOptions {
    /// Largest accepted condition estimate of the (jittered) matrix.
    pub max_condition: f64,
    /// Added to the diagonal before factorisation.
    pub jitter: f64,
}

impl Default for SpdOptions {
    fn default() -> Self {
        Self {
            max_condition: 1e12,
            jitter: 0.0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    TanhDeriv(Var),
    TanhSlope(Var, Var),
    Square(Var),
    Sum(Var),
    Dot(Var, Var),
    SumLast(Var),
    RepeatLast(Var, usize),
    Diag(Var),
    ScaleColumns(Var, Var),
    Tile(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Concat(Var, Var, usize),
    Slice(Var, usize, usize),
    Conv1d(Var, Var, Option<Var>),
    ConvAdjointWeight(Var),
    SolveSpd { a: Var, b: Var, factors: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::AddBias(..) => "add-bias",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::TanhDeriv(_) => "tanh-derivative",
            Op::TanhSlope(..) => "tanh-slope",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::SumLast(_) => "sum-last",
            Op::RepeatLast(..) => "repeat-last",
            Op::Diag(_) => "diagonal-from-vector",
            Op::ScaleColumns(..) => "scale-columns",
            Op::Tile(..) => "tile",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Conv1d(..) => "conv1d-circular",
            Op::ConvAdjointWeight(_) => "conv-adjoint-weight",
            Op::SolveSpd { .. } => "small-linear-solve",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Input | Op::Param(_))
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

/// Adjoints of the leaves of a graph after [`Graph::backward`].
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Adjoint of a leaf node (input, parameter or constant). `None` when the
    /// seed does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }
}

/// Append-only tape of evaluated tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_grads: BTreeMap<usize, Tensor>,
    check_finite: bool,
}

fn dims3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that rejects any node whose value contains NaN or Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        let id = self.next_id();
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
        });
        Ok(Var(id))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Cached forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Same as [`Graph::value`]; values are computed when nodes are created.
    pub fn forward(&self, v: Var) -> &Tensor {
        self.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false).expect("constant leaf")
    }

    /// A leaf whose adjoint is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, true).expect("input leaf")
    }

    /// A parameter leaf; its gradient accumulates into the slot `key`.
    pub fn param(&mut self, key: usize, value: Arc<Tensor>) -> Var {
        let id = self.next_id();
        self.nodes.push(Node {
            op: Op::Param(key),
            value,
            needs_grad: true,
        });
        Var(id)
    }

    pub fn param_grad(&self, key: usize) -> Option<&Tensor> {
        self.param_grads.get(&key)
    }

    pub fn param_grads(&self) -> &BTreeMap<usize, Tensor> {
        &self.param_grads
    }

    pub fn zero_grad(&mut self) {
        self.param_grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let id = self.next_id();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape(id, "matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() != sb.len() || !(2..=3).contains(&sa.len()) {
            return Err(bad());
        }
        let (ba, m, k) = dims3(&sa).ok_or_else(bad)?;
        let (bb, k2, n) = dims3(&sb).ok_or_else(bad)?;
        if ba != bb || k != k2 {
            return Err(bad());
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                kernels::gemm(
                    MatRef::new(&va[i * m * k..], m, k),
                    MatRef::new(&vb[i * k * n..], k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out), ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let id = self.next_id();
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                id,
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(op, t, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn tanh_slope(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::TanhSlope(a, b), kernels::tanh_slope)
    }

    /// `x + bias` with `bias` broadcast over all leading axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let id = self.next_id();
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != c || sx.is_empty() {
            return Err(Error::shape(id, "add-bias", format!("{sx:?} + {sb:?}")));
        }
        let vb = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&vb) {
                *v += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(Op::AddBias(x, bias), t, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| c * v);
        let ng = self.ng(x);
        self.push(Op::Scale(x, c), t, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(Op::Tanh(x), t, ng)
    }

    /// Elementwise `1 - tanh(x)^2`.
    pub fn tanh_deriv(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::tanh_deriv);
        let ng = self.ng(x);
        self.push(Op::TanhDeriv(x), t, ng)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(Op::Square(x), t, ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    /// Full contraction of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let id = self.next_id();
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                id,
                "dot",
                format!("{:?} . {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Dot(a, b), Tensor::scalar(s), ng)
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let id = self.next_id();
        let sx = self.shape(x).to_vec();
        let Some((&l, lead)) = sx.split_last() else {
            return Err(Error::shape(id, "sum-last", "scalar input"));
        };
        let data = if l == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.value(x).data().chunks(l).map(|c| c.iter().sum()).collect()
        };
        let ng = self.ng(x);
        self.push(Op::SumLast(x), Tensor::from_parts(lead.to_vec(), data), ng)
    }

    /// Repeats every element `n` times along a widened last axis
    /// (`[.., k] -> [.., k * n]`); the adjoint of [`Graph::sum_last`] after a
    /// reshape.
    pub fn repeat_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let id = self.next_id();
        let mut shape = self.shape(x).to_vec();
        let Some(last) = shape.last_mut() else {
            return Err(Error::shape(id, "repeat-last", "scalar input"));
        };
        *last *= n;
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let ng = self.ng(x);
        self.push(Op::RepeatLast(x, n), Tensor::from_parts(shape, data), ng)
    }

    /// Square matrix with `v` on its diagonal.
    pub fn diag(&mut self, v: Var) -> Result<Var> {
        let id = self.next_id();
        let sv = self.shape(v);
        if sv.len() != 1 {
            return Err(Error::shape(id, "diagonal-from-vector", format!("{sv:?}")));
        }
        let n = sv[0];
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &x) in self.value(v).data().iter().enumerate() {
            t.data_mut()[i * n + i] = x;
        }
        let ng = self.ng(v);
        self.push(Op::Diag(v), t, ng)
    }

    /// Right-multiplies rows of `x` by `diag(d)`.
    ///
    /// `d: [c]` scales the last axis of any `x`; `d: [b, c]` scales the rows of
    /// batch `i` of `x: [b, r, c]` by `d[i]`.
    pub fn scale_columns(&mut self, x: Var, d: Var) -> Result<Var> {
        let id = self.next_id();
        let (sx, sd) = (self.shape(x).to_vec(), self.shape(d).to_vec());
        let groups = match (sx.as_slice(), sd.as_slice()) {
            ([.., c], [c2]) if c == c2 => 1,
            ([b, _, c], [b2, c2]) if b == b2 && c == c2 => *b,
            _ => return Err(Error::shape(id, "scale-columns", format!("{sx:?} * diag{sd:?}"))),
        };
        let c = *sd.last().unwrap();
        let per_group = self.value(x).numel() / groups.max(1);
        let vd = self.value(d).data().to_vec();
        let mut t = self.value(x).clone();
        if c > 0 {
            for (gi, block) in t.data_mut().chunks_mut(per_group.max(1)).enumerate() {
                let drow = &vd[gi * c..(gi + 1) * c];
                for row in block.chunks_mut(c) {
                    for (v, s) in row.iter_mut().zip(drow) {
                        *v *= s;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(d);
        self.push(Op::ScaleColumns(x, d), t, ng)
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, n: usize) -> Result<Var> {
        let vx = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(vx.shape());
        let mut data = Vec::with_capacity(n * vx.numel());
        for _ in 0..n {
            data.extend_from_slice(vx.data());
        }
        let ng = self.ng(x);
        self.push(Op::Tile(x, n), Tensor::from_parts(shape, data), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let id = self.next_id();
        let vx = self.value(x);
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(Error::shape(id, "reshape", format!("{:?} -> {shape:?}", vx.shape())));
        }
        let t = Tensor::from_parts(shape.to_vec(), vx.data().to_vec());
        let ng = self.ng(x);
        self.push(Op::Reshape(x), t, ng)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let id = self.next_id();
        let sx = self.shape(x).to_vec();
        let Some((b, m, n)) = dims3(&sx) else {
            return Err(Error::shape(id, "transpose", format!("{sx:?}")));
        };
        let t = transpose_last2(self.value(x).data(), b, m, n);
        let shape = if sx.len() == 2 { vec![n, m] } else { vec![b, n, m] };
        let ng = self.ng(x);
        self.push(Op::Transpose(x), Tensor::from_parts(shape, t), ng)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let id = self.next_id();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::shape(id, "concat", format!("{sa:?} ++ {sb:?} on axis {axis}")));
        }
        let (outer, la, inner) = split_axis(&sa, axis);
        let lb = sb[axis];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&vb[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Concat(a, b, axis), Tensor::from_parts(shape, data), ng)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let id = self.next_id();
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::shape(
                id,
                "slice",
                format!("{sx:?}[axis {axis}: {start}..{}]", start + len),
            ));
        }
        let (outer, l, inner) = split_axis(&sx, axis);
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * l * inner + start * inner;
            data.extend_from_slice(&vx[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let ng = self.ng(x);
        self.push(Op::Slice(x, axis, start), Tensor::from_parts(shape, data), ng)
    }

    /// Circular convolution of `x: [b, cin, len]` with `w: [cout, cin, ks]`
    /// (odd `ks`), plus an optional per-channel bias. Output length equals
    /// input length.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let id = self.next_id();
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |d: String| Error::shape(id, "conv1d-circular", d);
        let ([b, cin, len], [cout, cin2, ks]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(bad(format!("{sx:?} * {sw:?}")));
        };
        let (b, cin, len, cout, ks) = (*b, *cin, *len, *cout, *ks);
        if cin != *cin2 || ks % 2 == 0 || len == 0 {
            return Err(bad(format!("{sx:?} * {sw:?}")));
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [cout] {
                return Err(bad(format!("bias {:?} for {cout} channels", self.shape(bias))));
            }
        }
        let y = kernels::conv1d_circular(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|v| self.value(v).data()),
            b,
            cin,
            cout,
            len,
            ks,
        );
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|v| self.ng(v));
        self.push(Op::Conv1d(x, w, bias), Tensor::from_parts(vec![b, cout, len], y), ng)
    }

    /// Kernel of the transposed convolution operator: `[cout, cin, ks]` to
    /// `[cin, cout, ks]` with reversed taps.
    pub fn conv_adjoint_weight(&mut self, w: Var) -> Result<Var> {
        let id = self.next_id();
        let sw = self.shape(w).to_vec();
        let [cout, cin, ks] = sw.as_slice() else {
            return Err(Error::shape(id, "conv-adjoint-weight", format!("{sw:?}")));
        };
        let data = kernels::conv_adjoint_weight(self.value(w).data(), *cout, *cin, *ks);
        let shape = vec![*cin, *cout, *ks];
        let ng = self.ng(w);
        self.push(Op::ConvAdjointWeight(w), Tensor::from_parts(shape, data), ng)
    }

    /// Solves `A X = B` for symmetric positive definite `A` by Cholesky.
    ///
    /// `A: [k, k]` with `B: [k, m]`, or batched `A: [b, k, k]` with
    /// `B: [b, k, m]`. `A` is symmetrised as `(A + A^T) / 2` before
    /// factorisation. A failed factorisation or a condition estimate above
    /// `opts.max_condition` yields [`Error::SingularProjection`].
    pub fn solve_spd(&mut self, a: Var, b: Var, opts: &SpdOptions) -> Result<Var> {
        let id = self.next_id();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape(id, "small-linear-solve", format!("{sa:?} \\ {sb:?}"));
        if sa.len() != sb.len() {
            return Err(bad());
        }
        let (batch, k, k2) = dims3(&sa).ok_or_else(bad)?;
        let (batch2, k3, m) = dims3(&sb).ok_or_else(bad)?;
        if k != k2 || k != k3 || batch != batch2 {
            return Err(bad());
        }
        let va = self.value(a).data();
        let mut factors = vec![0.0; batch * k * k];
        let mut x = self.value(b).data().to_vec();
        for i in 0..batch {
            let src = &va[i * k * k..(i + 1) * k * k];
            let f = &mut factors[i * k * k..(i + 1) * k * k];
            for r in 0..k {
                for c in 0..k {
                    f[r * k + c] = 0.5 * (src[r * k + c] + src[c * k + r]);
                }
                f[r * k + r] += opts.jitter;
            }
            match kernels::cholesky(f, k) {
                Some(cond) if cond <= opts.max_condition => {}
                Some(cond) => return Err(Error::SingularProjection { condition: cond }),
                None => {
                    return Err(Error::SingularProjection {
                        condition: f64::INFINITY,
                    })
                }
            }
            kernels::cholesky_solve(f, k, &mut x[i * k * m..(i + 1) * k * m], m);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::SolveSpd { a, b, factors }, Tensor::from_parts(sb, x), ng)
    }

    /// Largest condition estimate of `A` as [`Graph::solve_spd`] would see it,
    /// or infinity when the factorisation fails.
    pub fn spd_condition(t: &Tensor, jitter: f64) -> f64 {
        let Some((batch, k, _)) = dims3(t.shape()) else {
            return f64::NAN;
        };
        let mut worst: f64 = 1.0;
        for i in 0..batch {
            let src = &t.data()[i * k * k..(i + 1) * k * k];
            let mut f = vec![0.0; k * k];
            for r in 0..k {
                for c in 0..k {
                    f[r * k + c] = 0.5 * (src[r * k + c] + src[c * k + r]);
                }
                f[r * k + r] += jitter;
            }
            match kernels::cholesky(&mut f, k) {
                Some(c) => worst = worst.max(c),
                None => return f64::INFINITY,
            }
        }
        worst
    }

    /// Reverse sweep from a scalar `seed`.
    ///
    /// Parameter gradients are added into the graph's parameter slots, so
    /// repeated calls accumulate until [`Graph::zero_grad`]. Adjoints of all
    /// leaves reached by the sweep are returned.
    pub fn backward(&mut self, seed: Var) -> Result<Gradients> {
        let seed_node = self.node(seed);
        if seed_node.value.numel() != 1 || !seed_node.value.shape().is_empty() {
            return Err(Error::NonScalarSeed {
                node: seed.0,
                shape: seed_node.value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(seed.0 + 1, || None);
        adj[seed.0] = Some(Tensor::scalar(1.0));
        let mut leaves = BTreeMap::new();

        for i in (0..=seed.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad && !node.op.is_leaf() {
                continue;
            }
            if let Op::Param(key) = node.op {
                match self.param_grads.get_mut(&key) {
                    Some(slot) => slot.add_assign(&g),
                    None => {
                        self.param_grads.insert(key, g.clone());
                    }
                }
            }
            if node.op.is_leaf() {
                leaves.insert(i, g);
                continue;
            }
            for (input, contrib) in self.adjoint(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(t) => t.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { leaves })
    }

    /// Contributions of the output adjoint `g` of node `i` to its inputs.
    fn adjoint(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let gd = g.data();
        match node.op {
            Op::Constant | Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (ba, m, k) = dims3(val(a).shape()).unwrap();
                let (_, _, n) = dims3(val(b).shape()).unwrap();
                let (va, vb) = (val(a).data(), val(b).data());
                let mut ga = vec![0.0; ba * m * k];
                let mut gb = vec![0.0; ba * k * n];
                for bi in 0..ba {
                    let gm = MatRef::new(&gd[bi * m * n..], m, n);
                    if self.ng(a) {
                        kernels::gemm(
                            gm,
                            MatRef::new(&vb[bi * k * n..], k, n).t(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            0.0,
                        );
                    }
                    if self.ng(b) {
                        kernels::gemm(
                            MatRef::new(&va[bi * m * k..], m, k).t(),
                            gm,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            0.0,
                        );
                    }
                }
                vec![(a, like(a, ga)), (b, like(b, gb))]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                let ga = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                vec![(a, like(a, ga)), (b, like(b, gb))]
            }
            Op::AddBias(x, b) => {
                let c = val(b).numel();
                let mut gb = vec![0.0; c];
                if c > 0 {
                    for row in gd.chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                vec![(x, g.clone()), (b, like(b, gb))]
            }
            Op::Scale(x, c) => vec![(x, g.map(|v| c * v))],
            Op::Tanh(x) => {
                let gx = gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                vec![(x, like(x, gx))]
            }
            Op::TanhDeriv(x) => {
                let gx = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(g, &v)| {
                        let t = v.tanh();
                        g * (-2.0 * t * (1.0 - t * t))
                    })
                    .collect();
                vec![(x, like(x, gx))]
            }
            Op::TanhSlope(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                let mut ga = Vec::with_capacity(gd.len());
                let mut gb = Vec::with_capacity(gd.len());
                for ((g, &p), &q) in gd.iter().zip(va).zip(vb) {
                    let (da, db) = kernels::tanh_slope_partials(p, q);
                    ga.push(g * da);
                    gb.push(g * db);
                }
                vec![(a, like(a, ga)), (b, like(b, gb))]
            }
            Op::Square(x) => {
                let gx = gd.iter().zip(val(x).data()).map(|(g, v)| 2.0 * g * v).collect();
                vec![(x, like(x, gx))]
            }
            Op::Sum(x) => vec![(x, Tensor::full(val(x).shape(), gd[0]))],
            Op::Dot(a, b) => {
                let s = gd[0];
                vec![(a, val(b).map(|v| s * v)), (b, val(a).map(|v| s * v))]
            }
            Op::SumLast(x) => {
                let l = *val(x).shape().last().unwrap();
                let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v, l)).collect();
                vec![(x, like(x, gx))]
            }
            Op::RepeatLast(x, n) => {
                let gx = if n == 0 {
                    vec![0.0; val(x).numel()]
                } else {
                    gd.chunks(n).map(|c| c.iter().sum()).collect()
                };
                vec![(x, like(x, gx))]
            }
            Op::Diag(v) => {
                let n = val(v).numel();
                let gv = (0..n).map(|i| gd[i * n + i]).collect();
                vec![(v, like(v, gv))]
            }
            Op::ScaleColumns(x, d) => {
                let (vx, vd) = (val(x).data(), val(d).data());
                let sd = val(d).shape();
                let c = *sd.last().unwrap();
                let groups = if sd.len() == 2 { sd[0] } else { 1 };
                let per_group = vx.len() / groups.max(1);
                let mut gx = vec![0.0; vx.len()];
                let mut gdv = vec![0.0; vd.len()];
                if c > 0 && per_group > 0 {
                    for gi in 0..groups {
                        let drow = &vd[gi * c..(gi + 1) * c];
                        let base = gi * per_group;
                        for r in 0..per_group / c {
                            let off = base + r * c;
                            for j in 0..c {
                                gx[off + j] = gd[off + j] * drow[j];
                                gdv[gi * c + j] += gd[off + j] * vx[off + j];
                            }
                        }
                    }
                }
                vec![(x, like(x, gx)), (d, like(d, gdv))]
            }
            Op::Tile(x, n) => {
                let m = val(x).numel();
                let mut gx = vec![0.0; m];
                for i in 0..n {
                    for (acc, v) in gx.iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                        *acc += v;
                    }
                }
                vec![(x, like(x, gx))]
            }
            Op::Reshape(x) => vec![(x, like(x, gd.to_vec()))],
            Op::Transpose(x) => {
                let (b, m, n) = dims3(val(x).shape()).unwrap();
                // g has shape [b, n, m]
                vec![(x, like(x, transpose_last2(gd, b, n, m)))]
            }
            Op::Concat(a, b, axis) => {
                let (outer, la, inner) = split_axis(val(a).shape(), axis);
                let lb = val(b).shape()[axis];
                let mut ga = Vec::with_capacity(outer * la * inner);
                let mut gb = Vec::with_capacity(outer * lb * inner);
                let stride = (la + lb) * inner;
                for o in 0..outer {
                    ga.extend_from_slice(&gd[o * stride..o * stride + la * inner]);
                    gb.extend_from_slice(&gd[o * stride + la * inner..(o + 1) * stride]);
                }
                vec![(a, like(a, ga)), (b, like(b, gb))]
            }
            Op::Slice(x, axis, start) => {
                let (outer, l, inner) = split_axis(val(x).shape(), axis);
                let len = y.shape()[axis];
                let mut gx = vec![0.0; val(x).numel()];
                for o in 0..outer {
                    let base = o * l * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(x, like(x, gx))]
            }
            Op::Conv1d(x, w, bias) => {
                let (sx, sw) = (val(x).shape(), val(w).shape());
                let (b, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, ks) = (sw[0], sw[2]);
                let mut out = Vec::new();
                if self.ng(x) {
                    let wa = kernels::conv_adjoint_weight(val(w).data(), cout, cin, ks);
                    let gx = kernels::conv1d_circular(gd, &wa, None, b, cout, cin, len, ks);
                    out.push((x, like(x, gx)));
                }
                if self.ng(w) {
                    let gw = kernels::conv1d_weight_grad(val(x).data(), gd, b, cin, cout, len, ks);
                    out.push((w, like(w, gw)));
                }
                if let Some(bias) = bias {
                    let mut gb = vec![0.0; cout];
                    for bi in 0..b {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let base = (bi * cout + co) * len;
                            *acc += gd[base..base + len].iter().sum::<f64>();
                        }
                    }
                    out.push((bias, like(bias, gb)));
                }
                out
            }
            Op::ConvAdjointWeight(w) => {
                // y has shape [cin, cout, ks]; the map is its own inverse with
                // the channel roles exchanged.
                let sy = y.shape();
                let gw = kernels::conv_adjoint_weight(gd, sy[0], sy[1], sy[2]);
                vec![(w, like(w, gw))]
            }
            Op::SolveSpd { a, b, ref factors } => {
                let (batch, k, m) = dims3(y.shape()).unwrap();
                // gB = A^{-1} gX ; gA = -sym(gB X^T)
                let mut gb = gd.to_vec();
                for i in 0..batch {
                    kernels::cholesky_solve(
                        &factors[i * k * k..(i + 1) * k * k],
                        k,
                        &mut gb[i * k * m..(i + 1) * k * m],
                        m,
                    );
                }
                let mut ga = vec![0.0; batch * k * k];
                let vx = y.data();
                for i in 0..batch {
                    let gbi = &gb[i * k * m..(i + 1) * k * m];
                    let xi = &vx[i * k * m..(i + 1) * k * m];
                    let gai = &mut ga[i * k * k..(i + 1) * k * k];
                    for r in 0..k {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += gbi[r * m + j] * xi[c * m + j] + gbi[c * m + j] * xi[r * m + j];
                            }
                            gai[r * k + c] = -0.5 * s;
                        }
                    }
                }
                vec![(a, like(a, ga)), (b, like(b, gb))]
            }
        }
    }
}

fn transpose_last2(data: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let src = &data[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for r in 0..m {
            for c in 0..n {
                dst[c * m + r] = src[r * n + c];
            }
        }
    }
    out
}
