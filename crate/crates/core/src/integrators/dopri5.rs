use super::{check_finite, IntegratorSpec, Trajectory};
use crate::error::{Error, Result};

// Autonomous fields only, so the stage times are not needed.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// Fifth-order weights minus the embedded fourth-order ones.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Dense output.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Adaptive Dormand–Prince 5(4) with dense output.
#[derive(Clone, Copy, Debug)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub dt_min: f64,
    pub safety: f64,
    /// Upper bound on the internal step.
    pub max_step: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dopri5Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Self::from_spec(&IntegratorSpec::dopri5())
    }
}

impl Dopri5 {
    pub fn from_spec(spec: &IntegratorSpec) -> Self {
        match *spec {
            IntegratorSpec::Dopri5 {
                rtol,
                atol,
                dt_min,
                safety,
            } => Self {
                rtol,
                atol,
                dt_min,
                safety,
                max_step: f64::INFINITY,
            },
            _ => panic!("not a dopri5 spec"),
        }
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = h;
        self
    }

    pub fn integrate<F>(&self, f: &mut F, u0: &[f64], t_grid: &[f64]) -> Result<Trajectory>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        self.integrate_with_stats(f, u0, t_grid).map(|(t, _)| t)
    }

    pub fn integrate_with_stats<F>(&self, f: &mut F, u0: &[f64], t_grid: &[f64]) -> Result<(Trajectory, Dopri5Stats)>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let n = u0.len();
        let mut stats = Dopri5Stats::default();
        let mut states = Vec::with_capacity(n * t_grid.len());
        states.extend_from_slice(u0);
        let t_end = *t_grid.last().expect("nonempty grid");
        let mut t = t_grid[0];
        let mut y = u0.to_vec();
        let mut k1 = f(&y)?;
        stats.evaluations += 1;
        let mut h = self.initial_step(f, &y, &k1, t_end - t, &mut stats)?;
        let mut next_out = 1;
        let mut ytmp = vec![0.0; n];
        let mut facold: f64 = 1e-4;
        let mut last_rejected = false;

        while next_out < t_grid.len() {
            let remaining = t_end - t;
            if h < self.dt_min && remaining > self.dt_min {
                return Err(Error::StepUnderflow { t, dt: h });
            }
            let h_step = h.min(remaining).min(self.max_step);

            for i in 0..n {
                ytmp[i] = y[i] + h_step * A21 * k1[i];
            }
            let k2 = f(&ytmp)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * (A31 * k1[i] + A32 * k2[i]);
            }
            let k3 = f(&ytmp)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            let k4 = f(&ytmp)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            let k5 = f(&ytmp)?;
            for i in 0..n {
                ytmp[i] = y[i] + h_step * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            let k6 = f(&ytmp)?;
            let y_new: Vec<f64> = (0..n)
                .map(|i| y[i] + h_step * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]))
                .collect();
            let k7 = f(&y_new)?;
            stats.evaluations += 6;

            let mut err = 0.0;
            for i in 0..n {
                let e = h_step * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
                err += (e / sc) * (e / sc);
            }
            let err = if n == 0 { 0.0 } else { (err / n as f64).sqrt() };
            if !err.is_finite() {
                check_finite(&y_new, t + h_step)?;
                return Err(Error::NonFiniteState { t: t + h_step });
            }

            // Step-size controller with Lund stabilisation.
            let fac11 = err.powf(0.2 - 0.04 * 0.75);
            let mut fac = fac11 / facold.powf(0.04) / self.safety;
            fac = fac.clamp(1.0 / 10.0, 1.0 / 0.2);
            let h_new = h_step / fac;

            if err <= 1.0 {
                stats.accepted += 1;
                facold = err.max(1e-4);
                let t_new = t + h_step;
                while next_out < t_grid.len() && t_grid[next_out] <= t_new + 1e-14 * t_new.abs() {
                    let tq = t_grid[next_out];
                    if tq >= t_new {
                        states.extend_from_slice(&y_new);
                    } else {
                        let theta = (tq - t) / h_step;
                        let theta1 = 1.0 - theta;
                        for i in 0..n {
                            let r1 = y[i];
                            let r2 = y_new[i] - y[i];
                            let r3 = h_step * k1[i] - r2;
                            let r4 = r2 - h_step * k7[i] - r3;
                            let r5 =
                                h_step * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                            states.push(r1 + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5))));
                        }
                    }
                    next_out += 1;
                }
                check_finite(&y_new, t_new)?;
                y = y_new;
                k1 = k7;
                t = t_new;
                h = if last_rejected { h_new.min(h_step) } else { h_new };
                last_rejected = false;
            } else {
                stats.rejected += 1;
                h = h_step / (fac11 / self.safety).min(1.0 / 0.2);
                last_rejected = true;
            }
        }
        Ok((
            Trajectory {
                times: t_grid.to_vec(),
                states,
                n,
            },
            stats,
        ))
    }

    /// Automatic initial step from the size of the state, the first
    /// derivative and a finite-difference estimate of the second.
    fn initial_step<F>(&self, f: &mut F, y: &[f64], f0: &[f64], span: f64, stats: &mut Dopri5Stats) -> Result<f64>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let n = y.len().max(1) as f64;
        let sc: Vec<f64> = y.iter().map(|v| self.atol + self.rtol * v.abs()).collect();
        let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / n).sqrt();
        let d0 = norm(y);
        let d1 = norm(f0);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span).min(self.max_step);
        let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
        let f1 = f(&y1)?;
        stats.evaluations += 1;
        let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
        let d2 = norm(&diff) / h0;
        let dmax = d1.max(d2);
        let h1 = if dmax <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dmax).powf(1.0 / 5.0)
        };
        Ok((100.0 * h0).min(h1).min(span).min(self.max_step))
    }
}
