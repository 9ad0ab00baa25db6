//! Ground-truth dynamics, initial-condition samplers, analytic first
//! integrals and dataset generation.

mod dataset;

pub use dataset::{Normalization, TrajectorySet};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::{self, IntegratorSpec};
use crate::models::Polynomial;

pub const GRAVITY: f64 = 9.8;
pub const KDV_ALPHA: f64 = -6.0;
pub const KDV_BETA: f64 = 1.0;
pub const KDV_LENGTH: f64 = 10.0;
pub const KDV_SITES: usize = 50;
pub const KDV_DX: f64 = KDV_LENGTH / KDV_SITES as f64;
pub const FHN_RESISTANCE: f64 = 0.8;
pub const FHN_SOURCE: f64 = -0.7;
const FHN_RATE: f64 = 0.08;
/// Closest approach of the two bodies before the field is rejected.
pub const COLLISION_DISTANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    MassSpring,
    TwoBody,
    DoublePendulum,
    #[serde(rename = "fitzhugh-nagumo")]
    FitzHughNagumo,
    Kdv,
}

/// Sampled parameters of one series, e.g. rod lengths or the external
/// current.
pub type SeriesMeta = BTreeMap<String, f64>;

/// Which group of random streams a dataset draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self, series: usize) -> u64 {
        let group = match self {
            Split::Train => 0u64,
            Split::Test => 1u64,
        };
        (group << 32) | series as u64
    }
}

impl SystemKind {
    pub const ALL: [SystemKind; 5] = [
        SystemKind::MassSpring,
        SystemKind::TwoBody,
        SystemKind::DoublePendulum,
        SystemKind::FitzHughNagumo,
        SystemKind::Kdv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::MassSpring => "mass-spring",
            SystemKind::TwoBody => "two-body",
            SystemKind::DoublePendulum => "double-pendulum",
            SystemKind::FitzHughNagumo => "fitzhugh-nagumo",
            SystemKind::Kdv => "kdv",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown system {name:?}")))
    }

    /// Width of the observed state.
    pub fn n_state(&self) -> usize {
        match self {
            SystemKind::MassSpring => 2,
            SystemKind::TwoBody | SystemKind::DoublePendulum => 8,
            SystemKind::FitzHughNagumo => 4,
            SystemKind::Kdv => KDV_SITES,
        }
    }

    /// Whether the observed state is `(q, v)` with `dq/dt = v`.
    pub fn is_second_order(&self) -> bool {
        matches!(
            self,
            SystemKind::MassSpring | SystemKind::TwoBody | SystemKind::DoublePendulum
        )
    }

    /// Time derivative of the observed state.
    pub fn rhs(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n_state() {
            return Err(Error::Config(format!(
                "{} state has width {}, got {}",
                self.name(),
                self.n_state(),
                u.len()
            )));
        }
        match self {
            SystemKind::MassSpring => Ok(vec![u[1], -u[0]]),
            SystemKind::TwoBody => two_body_rhs(u),
            SystemKind::DoublePendulum => Ok(pendulum_cartesian_rhs(u)),
            SystemKind::FitzHughNagumo => Ok(fhn_circuit_rhs(u)),
            SystemKind::Kdv => Ok(kdv_rhs(u)),
        }
    }

    pub fn catalog(&self) -> InvariantCatalog {
        let entries: Vec<Invariant> = match self {
            SystemKind::MassSpring => vec![Invariant::new("E", |u, _| 0.5 * (u[0] * u[0] + u[1] * u[1]))],
            SystemKind::TwoBody => vec![
                Invariant::new("H", |u, _| two_body_energy(u)),
                Invariant::new("p_x", |u, _| 0.5 * (u[4] + u[6])),
                Invariant::new("p_y", |u, _| 0.5 * (u[5] + u[7])),
                Invariant::new("L", |u, _| u[0] * u[5] - u[1] * u[4] + u[2] * u[7] - u[3] * u[6]),
            ],
            SystemKind::DoublePendulum => vec![
                Invariant::new("H", |u, _| pendulum_energy(u)),
                Invariant::new("c1", |u, m| u[0] * u[0] + u[1] * u[1] - m["l1"] * m["l1"]),
                Invariant::new("c2", |u, m| {
                    let (dx, dy) = (u[2] - u[0], u[3] - u[1]);
                    dx * dx + dy * dy - m["l2"] * m["l2"]
                }),
                Invariant::new("g1", |u, _| u[0] * u[4] + u[1] * u[5]),
                Invariant::new("g2", |u, _| {
                    (u[2] - u[0]) * (u[6] - u[4]) + (u[3] - u[1]) * (u[7] - u[5])
                }),
            ],
            SystemKind::FitzHughNagumo => vec![
                Invariant::new("I", |u, _| u[0] + diode(u[2]) + u[1]),
                Invariant::new("E", |u, _| u[2] - u[1] * FHN_RESISTANCE - u[3]),
            ],
            SystemKind::Kdv => vec![
                Invariant::new("mass", |u, _| u.iter().sum::<f64>() * KDV_DX),
                Invariant::new("H", |u, _| kdv_energy(u)),
            ],
        };
        InvariantCatalog { entries }
    }

    /// Catalog entries that are polynomials in the observed state, in the
    /// form a bank can use directly. Constant offsets are dropped.
    pub fn polynomial_invariant(&self, name: &str) -> Result<Polynomial> {
        let n = self.n_state();
        let zeros = |n: usize| vec![vec![0.0; n]; n];
        let unit = |idx: &[(usize, f64)]| {
            let mut c = vec![0.0; n];
            for &(i, a) in idx {
                c[i] = a;
            }
            c
        };
        // Symmetric quadratic form from `(i, j, coeff)` entries of `u^T Q u / 2`.
        let quad = |entries: &[(usize, usize, f64)]| {
            let mut q = zeros(n);
            for &(i, j, a) in entries {
                if i == j {
                    q[i][i] += 2.0 * a;
                } else {
                    q[i][j] += a;
                    q[j][i] += a;
                }
            }
            q
        };
        let p = Polynomial::new(name, n);
        let poly = match (self, name) {
            (SystemKind::MassSpring, "E") => Polynomial::half_squared_norm(name, n),
            (SystemKind::TwoBody, "p_x") => p.with_linear(unit(&[(4, 0.5), (6, 0.5)])),
            (SystemKind::TwoBody, "p_y") => p.with_linear(unit(&[(5, 0.5), (7, 0.5)])),
            (SystemKind::TwoBody, "L") => {
                p.with_quadratic(quad(&[(0, 5, 1.0), (1, 4, -1.0), (2, 7, 1.0), (3, 6, -1.0)]))
            }
            (SystemKind::DoublePendulum, "H") => {
                let mut q = zeros(n);
                for i in 4..8 {
                    q[i][i] = 1.0;
                }
                p.with_quadratic(q).with_linear(unit(&[(1, -GRAVITY), (3, -GRAVITY)]))
            }
            (SystemKind::DoublePendulum, "c1") => p.with_quadratic(quad(&[(0, 0, 1.0), (1, 1, 1.0)])),
            (SystemKind::DoublePendulum, "c2") => p.with_quadratic(quad(&[
                (0, 0, 1.0),
                (2, 2, 1.0),
                (0, 2, -2.0),
                (1, 1, 1.0),
                (3, 3, 1.0),
                (1, 3, -2.0),
            ])),
            (SystemKind::DoublePendulum, "g1") => p.with_quadratic(quad(&[(0, 4, 1.0), (1, 5, 1.0)])),
            (SystemKind::DoublePendulum, "g2") => {
                // (x2 - x1)(vx2 - vx1) + (y2 - y1)(vy2 - vy1)
                p.with_quadratic(quad(&[
                    (2, 6, 1.0),
                    (2, 4, -1.0),
                    (0, 6, -1.0),
                    (0, 4, 1.0),
                    (3, 7, 1.0),
                    (3, 5, -1.0),
                    (1, 7, -1.0),
                    (1, 5, 1.0),
                ]))
            }
            (SystemKind::FitzHughNagumo, "I") => p
                .with_linear(unit(&[(0, 1.0), (1, 1.0), (2, -1.0)]))
                .with_term(3, unit(&[(2, 1.0 / 3.0)])),
            (SystemKind::FitzHughNagumo, "E") => p.with_linear(unit(&[(1, -FHN_RESISTANCE), (2, 1.0), (3, -1.0)])),
            (SystemKind::Kdv, "mass") => p.with_linear(vec![KDV_DX; n]),
            (SystemKind::Kdv, "H") => {
                // Forward-difference gradient energy: -(beta / 2 dx) sum (u_{k+1} - u_k)^2.
                let c = -KDV_BETA / KDV_DX;
                let mut q = zeros(n);
                for k in 0..n {
                    let j = (k + 1) % n;
                    q[k][k] += 2.0 * c;
                    q[k][j] -= c;
                    q[j][k] -= c;
                }
                p.with_quadratic(q).with_term(3, vec![-KDV_ALPHA / 6.0 * KDV_DX; n])
            }
            _ => {
                return Err(Error::Config(format!(
                    "{} has no polynomial invariant named {name:?}",
                    self.name()
                )))
            }
        };
        Ok(poly)
    }

    /// Draws an initial condition in the coordinates the system is simulated
    /// in, together with the series parameters.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, SeriesMeta) {
        let mut meta = SeriesMeta::new();
        let u = |rng: &mut R, lo: f64, hi: f64| Uniform::new(lo, hi).unwrap().sample(rng);
        let state = match self {
            SystemKind::MassSpring => {
                // Energies in [0.25, 1], uniform phase.
                let r = u(rng, 0.5f64.sqrt(), 2f64.sqrt());
                let phase = u(rng, 0.0, 2.0 * PI);
                vec![r * phase.cos(), -r * phase.sin()]
            }
            SystemKind::TwoBody => {
                let r = u(rng, 0.5, 1.0);
                let theta = u(rng, 0.0, 2.0 * PI);
                // Normal spreads are variances.
                let eps_v = Normal::new(1.0, 0.05f64.sqrt()).unwrap().sample(rng);
                let eps_theta = Normal::new(0.0, 0.05f64.sqrt()).unwrap().sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let drift = Normal::new(0.0, 0.01f64.sqrt()).unwrap();
                let drift = [drift.sample(rng), drift.sample(rng)];
                meta.insert("r".into(), r);
                meta.insert("theta".into(), theta);
                meta.insert("eps_v".into(), eps_v);
                meta.insert("eps_theta".into(), eps_theta);
                two_body_initial(r, theta, eps_v, eps_theta, sign, drift).to_vec()
            }
            SystemKind::DoublePendulum => {
                let l1 = u(rng, 0.9, 1.1);
                let l2 = u(rng, 0.9, 1.1);
                meta.insert("l1".into(), l1);
                meta.insert("l2".into(), l2);
                vec![
                    u(rng, -0.5, 0.5),
                    u(rng, -0.5, 0.5),
                    u(rng, -0.1, 0.1),
                    u(rng, -0.1, 0.1),
                ]
            }
            SystemKind::FitzHughNagumo => {
                meta.insert("current".into(), u(rng, 0.7, 1.1));
                vec![u(rng, -1.5, 1.5), u(rng, 0.0, 2.0)]
            }
            SystemKind::Kdv => {
                let k1 = u(rng, 0.5, 2.0);
                let k2 = u(rng, 0.5, 2.0);
                let d1 = u(rng, 0.0, KDV_LENGTH);
                // Periodic separation of at least 2 on either side.
                let d2 = (d1 + u(rng, 2.0, KDV_LENGTH - 2.0)) % KDV_LENGTH;
                meta.insert("kappa1".into(), k1);
                meta.insert("d1".into(), d1);
                meta.insert("kappa2".into(), k2);
                meta.insert("d2".into(), d2);
                kdv_two_solitons(k1, d1, k2, d2)
            }
        };
        (state, meta)
    }

    /// Field in simulation coordinates.
    fn native_rhs(&self, meta: &SeriesMeta, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            SystemKind::DoublePendulum => Ok(pendulum_polar_rhs(meta["l1"], meta["l2"], u).to_vec()),
            SystemKind::FitzHughNagumo => Ok(fhn_core_rhs(meta["current"], u[0], u[1]).to_vec()),
            _ => self.rhs(u),
        }
    }

    fn observe(&self, meta: &SeriesMeta, native: &[f64]) -> Vec<f64> {
        match self {
            SystemKind::DoublePendulum => {
                polar_to_cartesian(meta["l1"], meta["l2"], native.try_into().unwrap()).to_vec()
            }
            SystemKind::FitzHughNagumo => fhn_to_circuit(meta["current"], native[0], native[1]).to_vec(),
            _ => native.to_vec(),
        }
    }

    /// Integrates one series from a native initial state and returns the
    /// observed states, `[steps + 1, N]` row-major.
    pub fn simulate(
        &self,
        meta: &SeriesMeta,
        native0: &[f64],
        dt: f64,
        steps: usize,
        integrator: &IntegratorSpec,
    ) -> Result<Vec<f64>> {
        let grid = integrators::uniform_grid(0.0, dt, steps);
        let mut f = |u: &[f64]| self.native_rhs(meta, u);
        let tr = integrators::integrate(&mut f, native0, &grid, integrator)?;
        let mut out = Vec::with_capacity((steps + 1) * self.n_state());
        for i in 0..tr.len() {
            out.extend(self.observe(meta, tr.state(i)));
        }
        Ok(out)
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What to generate: system, grid, count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub system: SystemKind,
    pub dt: f64,
    pub steps: usize,
    pub n_series: usize,
    pub seed: u64,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.steps == 0 || self.n_series == 0 {
            return Err(Error::Config(
                "dataset needs dt > 0, steps >= 1 and n_series >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a dataset. Each series draws from its own stream of a ChaCha8
/// generator keyed by `(seed, split, index)`, so the output does not depend
/// on thread scheduling.
pub fn generate(spec: &SystemSpec, split: Split) -> Result<TrajectorySet> {
    spec.validate()?;
    let integrator = IntegratorSpec::dopri5_generation();
    let kind = spec.system;
    let series: Vec<Result<(Vec<f64>, SeriesMeta)>> = (0..spec.n_series)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(split.stream(i));
            let (u0, meta) = kind.sample_initial(&mut rng);
            let data = kind.simulate(&meta, &u0, spec.dt, spec.steps, &integrator)?;
            Ok((data, meta))
        })
        .collect();
    let mut data = Vec::with_capacity(spec.n_series * (spec.steps + 1) * kind.n_state());
    let mut metadata = Vec::with_capacity(spec.n_series);
    for s in series {
        let (d, m) = s?;
        data.extend(d);
        metadata.push(m);
    }
    let mut set = TrajectorySet {
        system: kind,
        n_state: kind.n_state(),
        n_series: spec.n_series,
        n_steps: spec.steps,
        dt: spec.dt,
        seed: spec.seed,
        integrator,
        data,
        metadata,
        normalization: None,
    };
    set.normalization = Some(set.compute_normalization());
    log::info!(
        "generated {} {} series of {} steps",
        spec.n_series,
        kind.name(),
        spec.steps
    );
    Ok(set)
}

type Evaluator = fn(&[f64], &SeriesMeta) -> f64;

/// A named analytic first integral.
#[derive(Clone)]
pub struct Invariant {
    pub name: &'static str,
    eval: Evaluator,
}

impl Invariant {
    fn new(name: &'static str, eval: Evaluator) -> Self {
        Self { name, eval }
    }

    pub fn eval(&self, u: &[f64], meta: &SeriesMeta) -> f64 {
        (self.eval)(u, meta)
    }
}

impl std::fmt::Debug for Invariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Invariant").field("name", &self.name).finish()
    }
}

#[derive(Clone, Debug)]
pub struct InvariantCatalog {
    pub entries: Vec<Invariant>,
}

impl InvariantCatalog {
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    /// Largest `|V(u_s) - V(u_0)| / max(|V(u_0)|, 1)` over a series, per
    /// entry.
    pub fn max_relative_drift(&self, states: &[f64], n: usize, meta: &SeriesMeta) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| {
                let v0 = e.eval(&states[..n], meta);
                let scale = v0.abs().max(1.0);
                states
                    .chunks(n)
                    .map(|u| (e.eval(u, meta) - v0).abs() / scale)
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

fn diode(v: f64) -> f64 {
    v * v * v / 3.0 - v
}

/// Two bodies of unit mass placed opposite each other at distance `r` from
/// the origin. With `eps_v = 1` and `eps_theta = 0` the orbit is circular;
/// `drift` is a common velocity added to both bodies.
pub fn two_body_initial(r: f64, theta: f64, eps_v: f64, eps_theta: f64, sign: f64, drift: [f64; 2]) -> [f64; 8] {
    let (x1, y1) = (r * theta.cos(), r * theta.sin());
    let speed = eps_v / (2.0 * r.sqrt());
    let phi = theta + sign * 0.5 * PI + eps_theta * PI;
    let (vx, vy) = (speed * phi.cos(), speed * phi.sin());
    [
        x1,
        y1,
        -x1,
        -y1,
        vx + drift[0],
        vy + drift[1],
        -vx + drift[0],
        -vy + drift[1],
    ]
}

fn two_body_rhs(u: &[f64]) -> Result<Vec<f64>> {
    let (dx, dy) = (u[0] - u[2], u[1] - u[3]);
    let r2 = dx * dx + dy * dy;
    let r = r2.sqrt();
    if !(r >= COLLISION_DISTANCE) {
        return Err(Error::Collision { distance: r });
    }
    let c = 1.0 / (r2 * r);
    Ok(vec![u[4], u[5], u[6], u[7], -c * dx, -c * dy, c * dx, c * dy])
}

fn two_body_energy(u: &[f64]) -> f64 {
    let kinetic = 0.5 * u[4..8].iter().map(|v| v * v).sum::<f64>();
    let (dx, dy) = (u[0] - u[2], u[1] - u[3]);
    kinetic - 1.0 / (dx * dx + dy * dy).sqrt()
}

/// `(theta1, theta2, omega1, omega2)` derivative for unit masses.
pub fn pendulum_polar_rhs(l1: f64, l2: f64, s: &[f64]) -> [f64; 4] {
    let (t1, t2, w1, w2) = (s[0], s[1], s[2], s[3]);
    let d = t1 - t2;
    let (sd, cd) = d.sin_cos();
    let (m1, m2, g) = (1.0, 1.0, GRAVITY);
    let den = m1 + m2 * sd * sd;
    let a1 =
        (m2 * g * t2.sin() * cd - (l1 * w1 * w1 * cd + l2 * w2 * w2) * m2 * sd - (m1 + m2) * g * t1.sin()) / (l1 * den);
    let a2 =
        ((m1 + m2) * (l1 * w1 * w1 * sd - g * t2.sin() + g * t1.sin() * cd) + m2 * l2 * w2 * w2 * sd * cd) / (l2 * den);
    [w1, w2, a1, a2]
}

/// Polar state to `(x1, y1, x2, y2, vx1, vy1, vx2, vy2)` with `y` measured
/// along the hanging direction.
pub fn polar_to_cartesian(l1: f64, l2: f64, s: &[f64; 4]) -> [f64; 8] {
    let (s1, c1) = s[0].sin_cos();
    let (s2, c2) = s[1].sin_cos();
    let x1 = l1 * s1;
    let y1 = l1 * c1;
    let vx1 = l1 * c1 * s[2];
    let vy1 = -l1 * s1 * s[2];
    [
        x1,
        y1,
        x1 + l2 * s2,
        y1 + l2 * c2,
        vx1,
        vy1,
        vx1 + l2 * c2 * s[3],
        vy1 - l2 * s2 * s[3],
    ]
}

/// Inverse of [`polar_to_cartesian`]: rod lengths and polar state.
pub fn cartesian_to_polar(u: &[f64]) -> (f64, f64, [f64; 4]) {
    let (dx, dy) = (u[2] - u[0], u[3] - u[1]);
    let (dvx, dvy) = (u[6] - u[4], u[7] - u[5]);
    let l1 = u[0].hypot(u[1]);
    let l2 = dx.hypot(dy);
    let t1 = u[0].atan2(u[1]);
    let t2 = dx.atan2(dy);
    let w1 = (u[4] * t1.cos() - u[5] * t1.sin()) / l1;
    let w2 = (dvx * t2.cos() - dvy * t2.sin()) / l2;
    (l1, l2, [t1, t2, w1, w2])
}

fn pendulum_cartesian_rhs(u: &[f64]) -> Vec<f64> {
    let (l1, l2, s) = cartesian_to_polar(u);
    let [_, _, a1, a2] = pendulum_polar_rhs(l1, l2, &s);
    let (s1, c1) = s[0].sin_cos();
    let (s2, c2) = s[1].sin_cos();
    let (w1, w2) = (s[2], s[3]);
    let ax1 = l1 * (c1 * a1 - s1 * w1 * w1);
    let ay1 = -l1 * (s1 * a1 + c1 * w1 * w1);
    vec![
        u[4],
        u[5],
        u[6],
        u[7],
        ax1,
        ay1,
        ax1 + l2 * (c2 * a2 - s2 * w2 * w2),
        ay1 - l2 * (s2 * a2 + c2 * w2 * w2),
    ]
}

/// Kinetic plus potential energy; potential decreases along the hanging
/// direction `y`.
fn pendulum_energy(u: &[f64]) -> f64 {
    let kinetic = 0.5 * u[4..8].iter().map(|v| v * v).sum::<f64>();
    kinetic - GRAVITY * (u[1] + u[3])
}

/// `(dV/dt, dW/dt)` of the two-variable neuron model.
pub fn fhn_core_rhs(current: f64, v: f64, w: f64) -> [f64; 2] {
    [v - v * v * v / 3.0 - w + current, FHN_RATE * (v + 0.7 - 0.8 * w)]
}

/// Circuit state `(I_C, I_L, V_C, V_L)` from `(V, W)`.
pub fn fhn_to_circuit(current: f64, v: f64, w: f64) -> [f64; 4] {
    let [dv, dw] = fhn_core_rhs(current, v, w);
    [dv, w, v, dw / FHN_RATE]
}

fn fhn_circuit_rhs(u: &[f64]) -> Vec<f64> {
    let (v, w) = (u[2], u[1]);
    let current = u[0] + diode(v) + w;
    let [dv, dw] = fhn_core_rhs(current, v, w);
    vec![(1.0 - v * v) * dv - dw, dw, dv, dv - 0.8 * dw]
}

/// Two periodic solitons `-(12/alpha) kappa^2 sech^2(kappa (x - d))` on the
/// grid `x_k = k dx`.
pub fn kdv_two_solitons(k1: f64, d1: f64, k2: f64, d2: f64) -> Vec<f64> {
    let soliton = |x: f64, k: f64, d: f64| {
        (-3..=3)
            .map(|j| {
                let s = 1.0 / (k * (x - d + j as f64 * KDV_LENGTH)).cosh();
                -12.0 / KDV_ALPHA * k * k * s * s
            })
            .sum::<f64>()
    };
    (0..KDV_SITES)
        .map(|i| {
            let x = i as f64 * KDV_DX;
            soliton(x, k1, d1) + soliton(x, k2, d2)
        })
        .collect()
}

/// Periodic semi-discretisation written as a skew central difference applied
/// to the energy gradient, so both total mass and the discrete energy are
/// first integrals.
fn kdv_rhs(u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let at = |i: isize| u[i.rem_euclid(n as isize) as usize];
    let dx = KDV_DX;
    (0..n as isize)
        .map(|k| {
            let nonlinear = -0.5 * KDV_ALPHA * (at(k + 1).powi(2) - at(k - 1).powi(2)) / (2.0 * dx);
            let dispersive =
                KDV_BETA * (at(k + 2) - 2.0 * at(k + 1) + 2.0 * at(k - 1) - at(k - 2)) / (2.0 * dx.powi(3));
            nonlinear + dispersive
        })
        .collect()
}

fn kdv_energy(u: &[f64]) -> f64 {
    let n = u.len();
    (0..n)
        .map(|k| {
            let ux = (u[(k + 1) % n] - u[k]) / KDV_DX;
            -KDV_ALPHA / 6.0 * u[k].powi(3) - 0.5 * KDV_BETA * ux * ux
        })
        .sum::<f64>()
        * KDV_DX
}

#[cfg(test)]
mod tests;
