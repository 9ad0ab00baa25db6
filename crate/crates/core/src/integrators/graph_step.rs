//! One-step integrators expressed as graph ops, so training gradients flow
//! through every stage.

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Field evaluated on a `[batch, N]` node.
pub type GraphField<'a> = dyn FnMut(&mut Graph, Var) -> Result<Var> + 'a;

/// Fixed-step schemes available inside a graph. Dopri5 runs its fifth-order
/// update on `substeps` equal steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphScheme {
    Euler,
    Rk4,
    Leapfrog,
    Dopri5 { substeps: usize },
}

fn axpy(g: &mut Graph, x: Var, a: f64, k: Var) -> Result<Var> {
    let s = g.scale(k, a)?;
    g.add(x, s)
}

/// Sum of `coeff * k` over the given stages, added to `x` after scaling by `h`.
fn combine(g: &mut Graph, x: Var, h: f64, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = None;
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let s = g.scale(k, h * c)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    match acc {
        Some(a) => g.add(x, a),
        None => Ok(x),
    }
}

pub fn step(g: &mut Graph, scheme: GraphScheme, f: &mut GraphField<'_>, x: Var, dt: f64) -> Result<Var> {
    match scheme {
        GraphScheme::Euler => {
            let k = f(g, x)?;
            axpy(g, x, dt, k)
        }
        GraphScheme::Rk4 => {
            let k1 = f(g, x)?;
            let x2 = axpy(g, x, 0.5 * dt, k1)?;
            let k2 = f(g, x2)?;
            let x3 = axpy(g, x, 0.5 * dt, k2)?;
            let k3 = f(g, x3)?;
            let x4 = axpy(g, x, dt, k3)?;
            let k4 = f(g, x4)?;
            combine(g, x, dt / 6.0, &[(1.0, k1), (2.0, k2), (2.0, k3), (1.0, k4)])
        }
        GraphScheme::Leapfrog => leapfrog(g, f, x, dt),
        GraphScheme::Dopri5 { substeps } => {
            let n = substeps.max(1);
            let h = dt / n as f64;
            let mut y = x;
            for _ in 0..n {
                y = dopri5_step(g, f, y, h)?;
            }
            Ok(y)
        }
    }
}

fn leapfrog(g: &mut Graph, f: &mut GraphField<'_>, x: Var, dt: f64) -> Result<Var> {
    let n = g.shape(x)[1];
    let h = n / 2;
    let q = g.slice(x, 1, 0, h)?;
    let v = g.slice(x, 1, h, h)?;
    let f0 = f(g, x)?;
    let a0 = g.slice(f0, 1, h, h)?;
    let v_half = axpy(g, v, 0.5 * dt, a0)?;
    let x1 = g.concat(q, v_half, 1)?;
    let f1 = f(g, x1)?;
    let dq = g.slice(f1, 1, 0, h)?;
    let q_new = axpy(g, q, dt, dq)?;
    let x2 = g.concat(q_new, v_half, 1)?;
    let f2 = f(g, x2)?;
    let a2 = g.slice(f2, 1, h, h)?;
    let v_new = axpy(g, v_half, 0.5 * dt, a2)?;
    g.concat(q_new, v_new, 1)
}

fn dopri5_step(g: &mut Graph, f: &mut GraphField<'_>, x: Var, h: f64) -> Result<Var> {
    let k1 = f(g, x)?;
    let y2 = combine(g, x, h, &[(1.0 / 5.0, k1)])?;
    let k2 = f(g, y2)?;
    let y3 = combine(g, x, h, &[(3.0 / 40.0, k1), (9.0 / 40.0, k2)])?;
    let k3 = f(g, y3)?;
    let y4 = combine(g, x, h, &[(44.0 / 45.0, k1), (-56.0 / 15.0, k2), (32.0 / 9.0, k3)])?;
    let k4 = f(g, y4)?;
    let y5 = combine(
        g,
        x,
        h,
        &[
            (19372.0 / 6561.0, k1),
            (-25360.0 / 2187.0, k2),
            (64448.0 / 6561.0, k3),
            (-212.0 / 729.0, k4),
        ],
    )?;
    let k5 = f(g, y5)?;
    let y6 = combine(
        g,
        x,
        h,
        &[
            (9017.0 / 3168.0, k1),
            (-355.0 / 33.0, k2),
            (46732.0 / 5247.0, k3),
            (49.0 / 176.0, k4),
            (-5103.0 / 18656.0, k5),
        ],
    )?;
    let k6 = f(g, y6)?;
    combine(
        g,
        x,
        h,
        &[
            (35.0 / 384.0, k1),
            (500.0 / 1113.0, k3),
            (125.0 / 192.0, k4),
            (-2187.0 / 6784.0, k5),
            (11.0 / 84.0, k6),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{leapfrog_step, rk4_step};
    use crate::tensor::Tensor;

    fn spring_graph(g: &mut Graph, x: Var) -> Result<Var> {
        let a = g.constant(Tensor::matrix(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap());
        g.matmul(x, a)
    }

    fn spring(u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![u[1], -u[0]])
    }

    #[test]
    fn graph_steps_match_plain_steps() {
        let u = [0.7, -0.3];
        for (scheme, expect) in [
            (GraphScheme::Rk4, rk4_step(&mut spring, &u, 0.2).unwrap()),
            (GraphScheme::Leapfrog, leapfrog_step(&mut spring, &u, 0.2).unwrap()),
        ] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1, 2], u.to_vec()).unwrap());
            let y = step(&mut g, scheme, &mut spring_graph, x, 0.2).unwrap();
            for (a, b) in g.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dopri5_substeps_converge_at_fifth_order() {
        let error = |substeps: usize| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
            let y = step(&mut g, GraphScheme::Dopri5 { substeps }, &mut spring_graph, x, 0.5).unwrap();
            let v = g.value(y).data();
            (v[0] - 0.5f64.cos()).abs().max((v[1] + 0.5f64.sin()).abs())
        };
        assert!(error(4) < 1e-8);
        let ratio = error(2) / error(4);
        assert!(ratio >= 32.0 * 0.8, "{ratio}");
    }
}
