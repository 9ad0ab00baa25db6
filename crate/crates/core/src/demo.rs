//! Known mass-spring system integrated with and without projection, using
//! the analytic energy as the only bank component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{self, EvalConfig};
use crate::finde::ProjectionConfig;
use crate::integrators::IntegratorSpec;
use crate::models::{Arch, BaseSpec, Model, ModelSpec, Polynomial};
use crate::training::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub t: f64,
    pub q: f64,
    pub v: f64,
    #[serde(rename = "E")]
    pub energy: f64,
    pub q_exact: f64,
    pub v_exact: f64,
}

/// `d(q, v)/dt = (v, -q)` with `E = (q^2 + v^2)/2` in the bank.
pub fn mass_spring_model() -> Model {
    Model::new(ModelSpec {
        n_state: 2,
        base: BaseSpec::Linear {
            matrix: vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
        },
        arch: Arch::mlp(&[]),
        k: 0,
        bank_arch: None,
        analytic: vec![Polynomial::half_squared_norm("E", 2)],
        seed: 0,
    })
    .expect("fixed model")
}

/// Integrates from `(1, 0)`; a solver failure truncates the rows.
pub fn run_mass_spring(dt: f64, steps: usize, integrator: IntegratorSpec, mode: Mode) -> Vec<DemoRow> {
    let model = mass_spring_model();
    let cfg = EvalConfig {
        integrator,
        mode,
        projection: ProjectionConfig::default(),
        ..EvalConfig::default()
    };
    let r = eval::rollout(&model, &[1.0, 0.0], steps, dt, &cfg);
    (0..r.len())
        .map(|i| {
            let u = r.state(i);
            let t = i as f64 * dt;
            DemoRow {
                t,
                q: u[0],
                v: u[1],
                energy: 0.5 * (u[0] * u[0] + u[1] * u[1]),
                q_exact: t.cos(),
                v_exact: -t.sin(),
            }
        })
        .collect()
}

/// Largest `|E - 1/2|` over the rows.
pub fn max_energy_error(rows: &[DemoRow]) -> f64 {
    rows.iter().map(|r| (r.energy - 0.5).abs()).fold(0.0, f64::max)
}

pub fn write_csv(rows: &[DemoRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
