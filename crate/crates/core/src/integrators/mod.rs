//! Time integration: classical RK4, adaptive Dormand–Prince 5(4), leapfrog,
//! and forward Euler, on plain vectors and inside a [`Graph`](crate::tensor::Graph).

mod dopri5;
pub mod graph_step;

pub use dopri5::{Dopri5, Dopri5Stats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IntegratorSpec {
    Euler,
    Rk4,
    Leapfrog,
    Dopri5 {
        #[serde(default = "default_rtol")]
        rtol: f64,
        #[serde(default = "default_atol")]
        atol: f64,
        #[serde(default = "default_dt_min")]
        dt_min: f64,
        #[serde(default = "default_safety")]
        safety: f64,
    },
}

fn default_rtol() -> f64 {
    1e-7
}
fn default_atol() -> f64 {
    1e-9
}
fn default_dt_min() -> f64 {
    1e-12
}
fn default_safety() -> f64 {
    0.9
}

impl IntegratorSpec {
    pub fn dopri5() -> Self {
        IntegratorSpec::Dopri5 {
            rtol: default_rtol(),
            atol: default_atol(),
            dt_min: default_dt_min(),
            safety: default_safety(),
        }
    }

    /// Tolerances used for dataset generation.
    pub fn dopri5_generation() -> Self {
        IntegratorSpec::Dopri5 {
            rtol: 1e-10,
            atol: 1e-12,
            dt_min: default_dt_min(),
            safety: default_safety(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let IntegratorSpec::Dopri5 {
            rtol,
            atol,
            dt_min,
            safety,
        } = *self
        {
            if !(rtol > 0.0 && atol > 0.0 && dt_min > 0.0 && safety > 0.0 && safety <= 1.0) {
                return Err(Error::Config(
                    "dopri5 tolerances must be positive and safety in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// States on a time grid, `states` row-major `[times.len(), n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub n: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

fn check_finite(u: &[f64], t: f64) -> Result<()> {
    if u.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t })
    }
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect()
}

pub fn euler_step<F>(f: &mut F, u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k = f(u)?;
    Ok(axpy(u, dt, &k))
}

pub fn rk4_step<F>(f: &mut F, u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(u)?;
    let k2 = f(&axpy(u, 0.5 * dt, &k1))?;
    let k3 = f(&axpy(u, 0.5 * dt, &k2))?;
    let k4 = f(&axpy(u, dt, &k3))?;
    Ok(u.iter()
        .enumerate()
        .map(|(i, ui)| ui + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Kick-drift-kick step for a state `(q, v)` of even width.
///
/// `f` is the full vector field; its first half drives positions and its
/// second half velocities. Each half is read at the state the scheme
/// prescribes, so for a separable field this is the standard velocity Verlet.
pub fn leapfrog_step<F>(f: &mut F, u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = u.len();
    if !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "leapfrog needs a (q, v) state of even width, got {n}"
        )));
    }
    let h = n / 2;
    let mut w = u.to_vec();
    let f0 = f(&w)?;
    for i in 0..h {
        w[h + i] += 0.5 * dt * f0[h + i];
    }
    let f1 = f(&w)?;
    for i in 0..h {
        w[i] += dt * f1[i];
    }
    let f2 = f(&w)?;
    for i in 0..h {
        w[h + i] += 0.5 * dt * f2[h + i];
    }
    Ok(w)
}

/// One pass of a fixed-step method, or an adaptive dopri5 solve over `[0, dt]`.
pub fn step<F>(spec: &IntegratorSpec, f: &mut F, u: &[f64], dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let out = match *spec {
        IntegratorSpec::Euler => euler_step(f, u, dt)?,
        IntegratorSpec::Rk4 => rk4_step(f, u, dt)?,
        IntegratorSpec::Leapfrog => leapfrog_step(f, u, dt)?,
        IntegratorSpec::Dopri5 { .. } => {
            let solver = Dopri5::from_spec(spec);
            solver.integrate(f, u, &[0.0, dt])?.last().to_vec()
        }
    };
    check_finite(&out, dt)?;
    Ok(out)
}

/// Integrates `f` from `u0` and reports the state at every point of `t_grid`.
///
/// Fixed-step methods take one step per grid interval; dopri5 adapts its
/// steps and reads grid points from its dense output.
pub fn integrate<F>(f: &mut F, u0: &[f64], t_grid: &[f64], spec: &IntegratorSpec) -> Result<Trajectory>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    spec.validate()?;
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "time grid must be nonempty and strictly increasing".into(),
        ));
    }
    check_finite(u0, t_grid[0])?;
    if let IntegratorSpec::Dopri5 { .. } = spec {
        return Dopri5::from_spec(spec).integrate(f, u0, t_grid);
    }
    let n = u0.len();
    let mut states = Vec::with_capacity(n * t_grid.len());
    states.extend_from_slice(u0);
    let mut u = u0.to_vec();
    for w in t_grid.windows(2) {
        let dt = w[1] - w[0];
        u = match spec {
            IntegratorSpec::Euler => euler_step(f, &u, dt)?,
            IntegratorSpec::Rk4 => rk4_step(f, &u, dt)?,
            IntegratorSpec::Leapfrog => leapfrog_step(f, &u, dt)?,
            IntegratorSpec::Dopri5 { .. } => unreachable!(),
        };
        check_finite(&u, w[1])?;
        states.extend_from_slice(&u);
    }
    Ok(Trajectory {
        times: t_grid.to_vec(),
        states,
        n,
    })
}

/// `t0, t0 + dt, ..., t0 + steps * dt`.
pub fn uniform_grid(t0: f64, dt: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| t0 + i as f64 * dt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spring(u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![u[1], -u[0]])
    }

    #[test]
    fn zero_field_is_constant() {
        let mut zero = |u: &[f64]| Ok(vec![0.0; u.len()]);
        for spec in [IntegratorSpec::Rk4, IntegratorSpec::Leapfrog, IntegratorSpec::dopri5()] {
            let tr = integrate(&mut zero, &[1.5, -2.0], &uniform_grid(0.0, 0.1, 10), &spec).unwrap();
            for i in 0..tr.len() {
                assert_eq!(tr.state(i), &[1.5, -2.0]);
            }
        }
    }

    #[test]
    fn rk4_matches_harmonic_solution() {
        let tr = integrate(
            &mut spring,
            &[1.0, 0.0],
            &uniform_grid(0.0, 0.01, 100),
            &IntegratorSpec::Rk4,
        )
        .unwrap();
        let worst = (0..tr.len())
            .map(|i| {
                let t = tr.times[i];
                let s = tr.state(i);
                (s[0] - t.cos()).abs().max((s[1] + t.sin()).abs())
            })
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8, "{worst:e}");
    }

    #[test]
    fn leapfrog_hand_computed_step() {
        let w = leapfrog_step(&mut spring, &[1.0, 0.0], 0.2).unwrap();
        assert!((w[0] - 0.98).abs() < 1e-15);
        assert!((w[1] + 0.198).abs() < 1e-15);
        assert_eq!(leapfrog_step(&mut spring, &[0.3, 0.7], 0.0).unwrap(), vec![0.3, 0.7]);
        assert!(leapfrog_step(&mut spring, &[1.0, 0.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn non_finite_state_is_reported() {
        let mut blowup = |u: &[f64]| Ok(vec![f64::MAX * u[0].signum() * 10.0]);
        let err = integrate(&mut blowup, &[1.0], &[0.0, 1.0], &IntegratorSpec::Euler).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { .. }));
    }

    #[test]
    fn grid_must_increase() {
        let err = integrate(&mut spring, &[1.0, 0.0], &[0.0, 0.0], &IntegratorSpec::Rk4);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
