//! The first-integral bank `V: R^N -> R^K`: an optional learned network plus
//! closed-form polynomial components.

use serde::{Deserialize, Serialize};

use super::network::{Network, Trace};
use super::params::Bound;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `a_i * u_i^degree` summed over coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableTerm {
    pub degree: u32,
    pub coeffs: Vec<f64>,
}

/// `V(u) = 1/2 u^T Q u + c^T u + sum_terms sum_i a_i u_i^degree`.
///
/// The discrete gradient is the midpoint rule for the quadratic part and the
/// exact divided difference `sum_j a (v^j - u^j)/(v - u)` per coordinate for
/// the separable part, so the discrete chain rule holds to rounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polynomial {
    pub name: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub separable: Vec<SeparableTerm>,
}

impl Polynomial {
    pub fn new(name: impl Into<String>, n: usize) -> Self {
        Self {
            name: name.into(),
            n,
            quadratic: None,
            linear: None,
            separable: Vec::new(),
        }
    }

    pub fn with_quadratic(mut self, q: Vec<Vec<f64>>) -> Self {
        self.quadratic = Some(q);
        self
    }

    pub fn with_linear(mut self, c: Vec<f64>) -> Self {
        self.linear = Some(c);
        self
    }

    pub fn with_term(mut self, degree: u32, coeffs: Vec<f64>) -> Self {
        self.separable.push(SeparableTerm { degree, coeffs });
        self
    }

    /// `1/2 |u|^2`.
    pub fn half_squared_norm(name: impl Into<String>, n: usize) -> Self {
        let q = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(name, n).with_quadratic(q)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invariant '{}': {what}", self.name)));
        if let Some(q) = &self.quadratic {
            if q.len() != self.n || q.iter().any(|r| r.len() != self.n) {
                return bad("quadratic form must be n x n");
            }
        }
        if self.linear.as_ref().is_some_and(|c| c.len() != self.n) {
            return bad("linear coefficients must have length n");
        }
        if self.separable.iter().any(|t| t.coeffs.len() != self.n) {
            return bad("separable coefficients must have length n");
        }
        Ok(())
    }

    fn sym_q(&self) -> Option<Tensor> {
        self.quadratic.as_ref().map(|q| {
            let n = self.n;
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    t.data_mut()[i * n + j] = 0.5 * (q[i][j] + q[j][i]);
                }
            }
            t
        })
    }

    /// Plain evaluation at one state.
    pub fn eval(&self, u: &[f64]) -> f64 {
        let mut v = 0.0;
        if let Some(q) = self.sym_q() {
            let n = self.n;
            for i in 0..n {
                for j in 0..n {
                    v += 0.5 * u[i] * q.data()[i * n + j] * u[j];
                }
            }
        }
        if let Some(c) = &self.linear {
            v += c.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        }
        for t in &self.separable {
            v += t
                .coeffs
                .iter()
                .zip(u)
                .map(|(a, x)| a * x.powi(t.degree as i32))
                .sum::<f64>();
        }
        v
    }

    fn batch_of(&self, g: &Graph, x: Var) -> usize {
        g.shape(x)[0]
    }

    /// `x: [batch, n]` to `[batch, 1]`.
    pub fn value(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let batch = self.batch_of(g, x);
        let mut acc = g.constant(Tensor::zeros(&[batch]));
        if let Some(q) = self.sym_q() {
            let q = g.constant(q);
            let xq = g.matmul(x, q)?;
            let xqx = g.mul(xq, x)?;
            let s = g.sum_last(xqx)?;
            let s = g.scale(s, 0.5)?;
            acc = g.add(acc, s)?;
        }
        if let Some(c) = &self.linear {
            let c = g.constant(Tensor::vector(c.clone()));
            let s = g.scale_columns(x, c)?;
            let s = g.sum_last(s)?;
            acc = g.add(acc, s)?;
        }
        for t in &self.separable {
            let a = g.constant(Tensor::vector(t.coeffs.clone()));
            let p = power(g, x, t.degree)?;
            let s = g.scale_columns(p, a)?;
            let s = g.sum_last(s)?;
            acc = g.add(acc, s)?;
        }
        g.reshape(acc, &[batch, 1])
    }

    /// Gradient rows, `[batch, 1, n]`.
    pub fn gradient(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let batch = self.batch_of(g, x);
        let mut acc = g.constant(Tensor::zeros(&[batch, self.n]));
        if let Some(q) = self.sym_q() {
            let q = g.constant(q);
            let xq = g.matmul(x, q)?;
            acc = g.add(acc, xq)?;
        }
        if let Some(c) = &self.linear {
            let c = g.constant(Tensor::vector(c.clone()));
            acc = g.add_bias(acc, c)?;
        }
        for t in &self.separable {
            if t.degree == 0 {
                continue;
            }
            let da: Vec<f64> = t.coeffs.iter().map(|a| a * t.degree as f64).collect();
            let da = g.constant(Tensor::vector(da));
            let p = power(g, x, t.degree - 1)?;
            let s = g.scale_columns(p, da)?;
            acc = g.add(acc, s)?;
        }
        g.reshape(acc, &[batch, 1, self.n])
    }

    /// Discrete gradient rows between `v` and `u`, `[batch, 1, n]`.
    pub fn discrete_gradient(&self, g: &mut Graph, v: Var, u: Var) -> Result<Var> {
        let batch = self.batch_of(g, u);
        let mut acc = g.constant(Tensor::zeros(&[batch, self.n]));
        if let Some(q) = self.sym_q() {
            let q = g.constant(q);
            let mid = g.add(v, u)?;
            let mid = g.scale(mid, 0.5)?;
            let mq = g.matmul(mid, q)?;
            acc = g.add(acc, mq)?;
        }
        if let Some(c) = &self.linear {
            let c = g.constant(Tensor::vector(c.clone()));
            acc = g.add_bias(acc, c)?;
        }
        for t in &self.separable {
            if t.degree == 0 {
                continue;
            }
            // (v^j - u^j) / (v - u) = sum_{i<j} v^i u^(j-1-i)
            let mut s = None;
            for i in 0..t.degree {
                let pv = power(g, v, i)?;
                let pu = power(g, u, t.degree - 1 - i)?;
                let term = g.mul(pv, pu)?;
                s = Some(match s {
                    None => term,
                    Some(prev) => g.add(prev, term)?,
                });
            }
            let a = g.constant(Tensor::vector(t.coeffs.clone()));
            let s = g.scale_columns(s.expect("degree >= 1"), a)?;
            acc = g.add(acc, s)?;
        }
        g.reshape(acc, &[batch, 1, self.n])
    }
}

fn power(g: &mut Graph, x: Var, degree: u32) -> Result<Var> {
    if degree == 0 {
        return Ok(g.constant(Tensor::full(g.shape(x), 1.0)));
    }
    let mut p = x;
    for _ in 1..degree {
        p = g.mul(p, x)?;
    }
    Ok(p)
}

/// Learned and analytic first-integral candidates over states of width `n`.
#[derive(Clone, Debug)]
pub struct Bank {
    learned: Option<Network>,
    analytic: Vec<Polynomial>,
    n: usize,
}

/// Per-point data shared by the bank's value and Jacobians.
pub struct BankTrace {
    x: Var,
    learned: Option<Trace>,
}

impl BankTrace {
    pub fn input(&self) -> Var {
        self.x
    }
}

impl Bank {
    pub fn new(learned: Option<Network>, analytic: Vec<Polynomial>, n: usize) -> Result<Self> {
        if let Some(net) = &learned {
            if net.n_in() != n {
                return Err(Error::Config(format!(
                    "bank network takes {} inputs, state has {n}",
                    net.n_in()
                )));
            }
        }
        for poly in &analytic {
            poly.validate()?;
            if poly.n != n {
                return Err(Error::Config(format!(
                    "invariant '{}' is defined on width {}, state has {n}",
                    poly.name, poly.n
                )));
            }
        }
        Ok(Self { learned, analytic, n })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            learned: None,
            analytic: Vec::new(),
            n,
        }
    }

    pub fn k(&self) -> usize {
        self.learned.as_ref().map_or(0, Network::n_out) + self.analytic.len()
    }

    pub fn k_learned(&self) -> usize {
        self.learned.as_ref().map_or(0, Network::n_out)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.k() == 0
    }

    pub fn analytic(&self) -> &[Polynomial] {
        &self.analytic
    }

    pub fn trace(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<BankTrace> {
        let learned = match &self.learned {
            Some(net) => Some(net.forward(g, p, x)?),
            None => None,
        };
        Ok(BankTrace { x, learned })
    }

    /// `[batch, K]`, or `None` for an empty bank.
    pub fn values(&self, g: &mut Graph, t: &BankTrace) -> Result<Option<Var>> {
        let mut parts = Vec::new();
        if let Some(tr) = &t.learned {
            parts.push(tr.output);
        }
        for poly in &self.analytic {
            parts.push(poly.value(g, t.x)?);
        }
        join(g, parts, 1)
    }

    /// `M = dV/du` as `[batch, K, N]`.
    pub fn jacobian(&self, g: &mut Graph, p: &Bound, t: &BankTrace) -> Result<Option<Var>> {
        let mut parts = Vec::new();
        if let (Some(net), Some(tr)) = (&self.learned, &t.learned) {
            parts.push(net.jacobian(g, p, tr)?);
        }
        for poly in &self.analytic {
            parts.push(poly.gradient(g, t.x)?);
        }
        join(g, parts, 1)
    }

    /// Discrete Jacobian `M(v, u)` as `[batch, K, N]`.
    pub fn discrete_jacobian(&self, g: &mut Graph, p: &Bound, v: &BankTrace, u: &BankTrace) -> Result<Option<Var>> {
        let mut parts = Vec::new();
        if let (Some(net), Some(tv), Some(tu)) = (&self.learned, &v.learned, &u.learned) {
            parts.push(net.discrete_jacobian(g, p, tv, tu)?);
        }
        for poly in &self.analytic {
            parts.push(poly.discrete_gradient(g, v.x, u.x)?);
        }
        join(g, parts, 1)
    }
}

fn join(g: &mut Graph, parts: Vec<Var>, axis: usize) -> Result<Option<Var>> {
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for v in it {
        acc = g.concat(acc, v, axis)?;
    }
    Ok(Some(acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> Tensor {
        Tensor::new(
            vec![rows.len(), rows[0].len()],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_energy_gradient_and_midpoint() {
        let e = Polynomial::half_squared_norm("E", 2);
        let mut g = Graph::new();
        let u = g.constant(batch(&[&[0.3, -1.5]]));
        let v = g.constant(batch(&[&[1.1, 0.25]]));
        let val = e.value(&mut g, u).unwrap();
        assert_eq!(g.value(val).data(), &[0.5 * (0.09 + 2.25)]);
        let m = e.gradient(&mut g, u).unwrap();
        assert_eq!(g.value(m).data(), &[0.3, -1.5]);
        let d = e.discrete_gradient(&mut g, v, u).unwrap();
        assert_eq!(g.value(d).data(), &[0.5 * (0.3 + 1.1), 0.5 * (-1.5 + 0.25)]);
    }

    #[test]
    fn separable_discrete_chain_rule() {
        let p = Polynomial::new("p", 3)
            .with_linear(vec![0.5, -1.0, 2.0])
            .with_term(3, vec![1.0, 0.2, -0.7])
            .with_term(4, vec![0.1, 0.0, 0.3]);
        let (uu, vv) = ([0.4, -1.3, 0.9], [-0.2, 0.8, 1.7]);
        let mut g = Graph::new();
        let u = g.constant(batch(&[&uu]));
        let v = g.constant(batch(&[&vv]));
        let d = p.discrete_gradient(&mut g, v, u).unwrap();
        let lhs = p.eval(&vv) - p.eval(&uu);
        let rhs: f64 = g
            .value(d)
            .data()
            .iter()
            .zip(vv.iter().zip(&uu))
            .map(|(a, (x, y))| a * (x - y))
            .sum();
        assert!((lhs - rhs).abs() <= 1e-14 * (1.0 + lhs.abs()));
        let val = p.value(&mut g, u).unwrap();
        assert!((g.value(val).item() - p.eval(&uu)).abs() < 1e-15);
    }

    #[test]
    fn empty_bank_has_no_jacobian() {
        let bank = Bank::empty(3);
        let mut g = Graph::new();
        let p = crate::models::ParamStore::new().bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let t = bank.trace(&mut g, &p, x).unwrap();
        assert!(bank.jacobian(&mut g, &p, &t).unwrap().is_none());
        assert_eq!(bank.k(), 0);
    }
}
