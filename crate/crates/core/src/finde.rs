//! Projection of a base model onto the level set of its first integrals.
//!
//! Continuous time: `f = (I - Y) f_hat` with `Y = M^T (M M^T)^-1 M` and
//! `M = dV/du`. Discrete time: the one-step map solves
//! `(u' - u)/dt = (I - Y_bar(u', u)) psi_hat(u; dt)` with `Y_bar` built from
//! the discrete Jacobian, which keeps every `V_k` fixed up to the solver
//! tolerance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::graph_step::{self, GraphScheme};
use crate::integrators::{self, IntegratorSpec};
use crate::models::{Bound, Model};
use crate::tensor::{Graph, SpdOptions, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Largest accepted condition estimate of `M M^T`.
    pub max_condition: f64,
    /// Diagonal shift of `M M^T`; off by default.
    pub jitter: f64,
    /// Residual norm at which the implicit step is accepted.
    pub residual_tol: f64,
    pub max_iterations: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_condition: 1e12,
            jitter: 0.0,
            residual_tol: 1e-10,
            max_iterations: 100,
        }
    }
}

impl ProjectionConfig {
    pub fn spd(&self) -> SpdOptions {
        SpdOptions {
            max_condition: self.max_condition,
            jitter: self.jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_condition > 0.0 && self.jitter >= 0.0 && self.residual_tol > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(
                "projection thresholds must be positive and jitter nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// `(I - M^T (M M^T)^-1 M) f` for `m: [batch, K, N]` and `f: [batch, N]`.
pub fn project(g: &mut Graph, m: Var, f: Var, opts: &SpdOptions) -> Result<Var> {
    let (batch, n) = (g.shape(f)[0], g.shape(f)[1]);
    let f3 = g.reshape(f, &[batch, n, 1])?;
    let mf = g.matmul(m, f3)?;
    let mt = g.transpose(m)?;
    let gram = g.matmul(m, mt)?;
    let lambda = g.solve_spd(gram, mf, opts)?;
    let normal = g.matmul(mt, lambda)?;
    let normal = g.reshape(normal, &[batch, n])?;
    g.sub(f, normal)
}

/// Projected vector field at `x: [batch, N]`.
pub fn cfinde_field(g: &mut Graph, model: &Model, p: &Bound, x: Var, cfg: &ProjectionConfig) -> Result<Var> {
    let f_hat = model.base.eval(g, p, x)?;
    if model.bank.is_empty() {
        return Ok(f_hat);
    }
    let t = model.bank.trace(g, p, x)?;
    let m = model.bank.jacobian(g, p, &t)?.expect("nonempty bank");
    project(g, m, f_hat, &cfg.spd())
}

/// `psi_hat(x; dt) = (step(x) - x) / dt` for one pass of `scheme` over the
/// base field.
pub fn base_step(g: &mut Graph, model: &Model, p: &Bound, x: Var, dt: f64, scheme: GraphScheme) -> Result<Var> {
    let mut field = |g: &mut Graph, y: Var| model.base.eval(g, p, y);
    let next = graph_step::step(g, scheme, &mut field, x, dt)?;
    let inc = g.sub(next, x)?;
    g.scale(inc, 1.0 / dt)
}

/// `(x_next - x)/dt - (I - Y_bar(x_next, x)) psi` for batches `[batch, N]`.
#[allow(clippy::too_many_arguments)]
pub fn dfinde_residual(
    g: &mut Graph,
    model: &Model,
    p: &Bound,
    x_next: Var,
    x: Var,
    dt: f64,
    psi: Var,
    cfg: &ProjectionConfig,
) -> Result<Var> {
    let diff = g.sub(x_next, x)?;
    let lhs = g.scale(diff, 1.0 / dt)?;
    let rhs = if model.bank.is_empty() {
        psi
    } else {
        let tv = model.bank.trace(g, p, x_next)?;
        let tu = model.bank.trace(g, p, x)?;
        let m_bar = model.bank.discrete_jacobian(g, p, &tv, &tu)?.expect("nonempty bank");
        project(g, m_bar, psi, &cfg.spd())?
    };
    g.sub(lhs, rhs)
}

fn batch_tensor(states: &[f64], n: usize) -> Result<Tensor> {
    Tensor::new(vec![states.len() / n, n], states.to_vec())
}

/// Projected field at a batch of states, without gradient bookkeeping.
pub fn cfinde_field_values(model: &Model, states: &[f64], cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(batch_tensor(states, model.n_state())?);
    let f = cfinde_field(&mut g, model, &p, x, cfg)?;
    Ok(g.value(f).data().to_vec())
}

/// Bank Jacobian `M(u)` at one state, row-major `K x N`.
pub fn constraint_matrix(model: &Model, u: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(batch_tensor(u, model.n_state())?);
    let t = model.bank.trace(&mut g, &p, x)?;
    Ok(match model.bank.jacobian(&mut g, &p, &t)? {
        Some(m) => g.value(m).data().to_vec(),
        None => Vec::new(),
    })
}

/// Discrete gradient `M_bar(v, u)`, row-major `K x N`.
pub fn discrete_constraint_matrix(model: &Model, v: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let n = model.n_state();
    let xv = g.constant(batch_tensor(v, n)?);
    let xu = g.constant(batch_tensor(u, n)?);
    let tv = model.bank.trace(&mut g, &p, xv)?;
    let tu = model.bank.trace(&mut g, &p, xu)?;
    Ok(match model.bank.discrete_jacobian(&mut g, &p, &tv, &tu)? {
        Some(m) => g.value(m).data().to_vec(),
        None => Vec::new(),
    })
}

/// `Y = M^T (M M^T)^-1 M` at one state, row-major `N x N`.
pub fn projector_matrix(model: &Model, u: &[f64], cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(batch_tensor(u, model.n_state())?);
    let t = model.bank.trace(&mut g, &p, x)?;
    match model.bank.jacobian(&mut g, &p, &t)? {
        Some(m) => projector_from(&mut g, m, cfg),
        None => Ok(vec![0.0; model.n_state() * model.n_state()]),
    }
}

/// `Y_bar` between `v` and `u`, row-major `N x N`.
pub fn discrete_projector_matrix(model: &Model, v: &[f64], u: &[f64], cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let n = model.n_state();
    let xv = g.constant(batch_tensor(v, n)?);
    let xu = g.constant(batch_tensor(u, n)?);
    let tv = model.bank.trace(&mut g, &p, xv)?;
    let tu = model.bank.trace(&mut g, &p, xu)?;
    match model.bank.discrete_jacobian(&mut g, &p, &tv, &tu)? {
        Some(m) => projector_from(&mut g, m, cfg),
        None => Ok(vec![0.0; n * n]),
    }
}

fn projector_from(g: &mut Graph, m: Var, cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let mt = g.transpose(m)?;
    let gram = g.matmul(m, mt)?;
    let x = g.solve_spd(gram, m, &cfg.spd())?;
    let y = g.matmul(mt, x)?;
    Ok(g.value(y).data().to_vec())
}

/// Numeric `psi_hat(u; dt)` from one integrator pass over the base field.
pub fn base_increment(model: &Model, u: &[f64], dt: f64, integrator: &IntegratorSpec) -> Result<Vec<f64>> {
    let mut f = |y: &[f64]| model.base_field_values(y);
    let next = integrators::step(integrator, &mut f, u, dt)?;
    Ok(next.iter().zip(u).map(|(a, b)| (a - b) / dt).collect())
}

/// Residuals at several candidate next states `ws` (`[P, N]` flat) for a
/// common current state `u` and increment `psi`.
fn residuals(model: &Model, ws: &[f64], u: &[f64], psi: &[f64], dt: f64, cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let n = u.len();
    let count = ws.len() / n;
    let tile = |v: &[f64]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            data.extend_from_slice(v);
        }
        Tensor::new(vec![count, n], data)
    };
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let xv = g.constant(batch_tensor(ws, n)?);
    let xu = g.constant(tile(u)?);
    let ps = g.constant(tile(psi)?);
    let r = dfinde_residual(&mut g, model, &p, xv, xu, dt, ps, cfg)?;
    Ok(g.value(r).data().to_vec())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Residual of the implicit step at one candidate `u_next`.
pub fn dfinde_residual_values(
    model: &Model,
    u_next: &[f64],
    u: &[f64],
    dt: f64,
    psi: &[f64],
    cfg: &ProjectionConfig,
) -> Result<Vec<f64>> {
    residuals(model, u_next, u, psi, dt, cfg)
}

/// Extra Newton iterations attempted after the tolerance is met, kept only
/// while they still reduce the residual.
const POLISH_ITERATIONS: usize = 2;

/// Solves the implicit step for a given base increment `psi`.
///
/// Newton iteration with a forward-difference Jacobian (all `N + 1`
/// residuals in one batched evaluation) and step halving, started from
/// `u + dt psi`. The result is checked against the first-integral drift bound
/// before it is returned.
pub fn dfinde_solve(model: &Model, u: &[f64], psi: &[f64], dt: f64, cfg: &ProjectionConfig) -> Result<Vec<f64>> {
    let n = u.len();
    let mut w: Vec<f64> = u.iter().zip(psi).map(|(a, b)| a + dt * b).collect();
    if model.bank.is_empty() {
        return Ok(w);
    }
    let mut r = residuals(model, &w, u, psi, dt, cfg)?;
    let mut rn = norm(&r);
    let mut polish = 0;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if rn <= cfg.residual_tol {
            if polish == POLISH_ITERATIONS || rn == 0.0 {
                break;
            }
            polish += 1;
        }
        iterations += 1;
        let mut pts = Vec::with_capacity(n * n);
        let steps: Vec<f64> = w.iter().map(|x| 1e-7 * x.abs().max(1.0)).collect();
        for j in 0..n {
            let mut wj = w.clone();
            wj[j] += steps[j];
            pts.extend_from_slice(&wj);
        }
        let rp = residuals(model, &pts, u, psi, dt, cfg)?;
        let jac = DMatrix::from_fn(n, n, |i, j| (rp[j * n + i] - r[i]) / steps[j]);
        let Some(delta) = jac.lu().solve(&DVector::from_column_slice(&r)) else {
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = w.iter().zip(delta.iter()).map(|(a, d)| a - alpha * d).collect();
            let rt = residuals(model, &trial, u, psi, dt, cfg)?;
            let tn = norm(&rt);
            if tn < rn {
                w = trial;
                r = rt;
                rn = tn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !(rn <= cfg.residual_tol) {
        return Err(Error::NoConvergence {
            iterations,
            residual: rn,
        });
    }
    let mut both = w.clone();
    both.extend_from_slice(u);
    let vals = model.bank_values(&both)?;
    let k = model.bank.k();
    for i in 0..k {
        let (after, before) = (vals[i], vals[k + i]);
        let allowed = 1e-9 * (1.0 + before.abs());
        let drift = (after - before).abs();
        if !(drift <= allowed) {
            return Err(Error::InvariantViolation {
                index: i,
                drift,
                allowed,
            });
        }
    }
    Ok(w)
}

/// One implicit step from `u`, with `psi_hat` from the given integrator.
pub fn dfinde_predict(
    model: &Model,
    u: &[f64],
    dt: f64,
    integrator: &IntegratorSpec,
    cfg: &ProjectionConfig,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config("time step must be positive".into()));
    }
    let psi = base_increment(model, u, dt, integrator)?;
    dfinde_solve(model, u, &psi, dt, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, BaseSpec, ModelSpec, Polynomial};

    fn spring_model(analytic: Vec<Polynomial>) -> Model {
        Model::new(ModelSpec {
            n_state: 2,
            base: BaseSpec::Linear {
                matrix: vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            },
            arch: Arch::mlp(&[]),
            k: 0,
            bank_arch: None,
            analytic,
            seed: 0,
        })
        .unwrap()
    }

    fn linear_model(matrix: Vec<Vec<f64>>, analytic: Vec<Polynomial>) -> Model {
        Model::new(ModelSpec {
            n_state: 2,
            base: BaseSpec::Linear { matrix },
            arch: Arch::mlp(&[]),
            k: 0,
            bank_arch: None,
            analytic,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn projection_removes_the_constrained_component() {
        let first = Polynomial::new("u1", 2).with_linear(vec![1.0, 0.0]);
        // f_hat = (3, 5) everywhere is not linear; use A u at u = (1, 1) with A = [[3, 0], [0, 5]].
        let m = linear_model(vec![vec![3.0, 0.0], vec![0.0, 5.0]], vec![first]);
        let f = cfinde_field_values(&m, &[1.0, 1.0], &ProjectionConfig::default()).unwrap();
        assert_eq!(f, vec![0.0, 5.0]);
    }

    #[test]
    fn tangent_and_normal_vectors() {
        let e = Polynomial::half_squared_norm("E", 2);
        let cfg = ProjectionConfig::default();
        // Rotation field is tangent to circles.
        let m = spring_model(vec![e.clone()]);
        let u = [0.6, -0.8];
        let f = cfinde_field_values(&m, &u, &cfg).unwrap();
        assert!((f[0] - (-0.8)).abs() < 1e-15 && (f[1] + 0.6).abs() < 1e-15);
        // Radial field is normal.
        let radial = linear_model(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![e]);
        let f = cfinde_field_values(&radial, &u, &cfg).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn euler_increment_is_the_field() {
        let m = linear_model(vec![vec![-1.0, 0.0], vec![0.0, -1.0]], vec![]);
        for dt in [0.1, 0.01] {
            let psi = base_increment(&m, &[1.0, 0.0], dt, &IntegratorSpec::Euler).unwrap();
            assert!((psi[0] + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn leapfrog_increment_by_hand() {
        let m = spring_model(vec![]);
        let psi = base_increment(&m, &[1.0, 0.0], 0.2, &IntegratorSpec::Leapfrog).unwrap();
        assert!((psi[0] - (0.98 - 1.0) / 0.2).abs() < 1e-14);
        assert!((psi[1] - (-0.198) / 0.2).abs() < 1e-14);
    }

    #[test]
    fn implicit_step_keeps_energy() {
        let m = spring_model(vec![Polynomial::half_squared_norm("E", 2)]);
        let cfg = ProjectionConfig::default();
        let next = dfinde_predict(&m, &[1.0, 0.0], 0.2, &IntegratorSpec::Leapfrog, &cfg).unwrap();
        let e = 0.5 * (next[0] * next[0] + next[1] * next[1]);
        assert!((e - 0.5).abs() <= 1e-12);
        let psi = base_increment(&m, &[1.0, 0.0], 0.2, &IntegratorSpec::Leapfrog).unwrap();
        let r = dfinde_residual_values(&m, &next, &[1.0, 0.0], 0.2, &psi, &cfg).unwrap();
        assert!(norm(&r) <= 1e-10);
    }

    #[test]
    fn zero_field_fixed_point() {
        let m = linear_model(vec![vec![0.0; 2]; 2], vec![Polynomial::half_squared_norm("E", 2)]);
        let u = [0.3, 0.4];
        let next = dfinde_predict(&m, &u, 0.1, &IntegratorSpec::Rk4, &ProjectionConfig::default()).unwrap();
        assert_eq!(next, u.to_vec());
    }

    #[test]
    fn empty_bank_residual_is_plain_difference() {
        let m = spring_model(vec![]);
        let psi = [0.25, -1.0];
        let r = dfinde_residual_values(&m, &[1.1, 0.2], &[1.0, 0.0], 0.1, &psi, &ProjectionConfig::default()).unwrap();
        assert!((r[0] - (1.0 - 0.25)).abs() < 1e-12);
        assert!((r[1] - (2.0 + 1.0)).abs() < 1e-12);
    }
}
