//! Losses, Adam with cosine annealing, and the training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finde::{self, ProjectionConfig};
use crate::integrators::graph_step::{self, GraphScheme};
use crate::integrators::{Dopri5, IntegratorSpec};
use crate::models::{checkpoint, Bound, Model, ParamStore};
use crate::systems::TrajectorySet;
use crate::tensor::{Graph, Tensor, Var};

/// Scale at which 1-step errors are reported.
pub const LOSS_REPORT_SCALE: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Base model alone; any bank is ignored.
    Base,
    Cfinde,
    Dfinde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// One-step predictor used inside the loss.
    pub integrator: IntegratorSpec,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            integrator: IntegratorSpec::Rk4,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations >= 1
            && self.batch_size >= 1
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.log_every >= 1;
        if !ok {
            return Err(Error::Config(
                "training needs iterations, batch size and lr positive, betas in [0, 1)".into(),
            ));
        }
        self.integrator.validate()
    }
}

/// `lr0 * (1 + cos(pi * iter / total)) / 2`.
pub fn cosine_lr(iter: usize, total: usize, lr0: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update `p -= lr * m_hat / (sqrt(v_hat) + eps)` of
    /// every parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            assert_eq!(p.len(), g.len(), "gradient shape");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Mean over the batch of `||(gt_next - gt)/dt - (pred_next - gt)/dt||^2`.
pub fn loss_1step(g: &mut Graph, pred_next: Var, gt_next: Var, gt: Var, dt: f64) -> Result<Var> {
    let a = g.sub(gt_next, gt)?;
    let b = g.sub(pred_next, gt)?;
    let d = g.sub(a, b)?;
    mean_squared_rows(g, d, 1.0 / dt)
}

fn mean_squared_rows(g: &mut Graph, d: Var, scale: f64) -> Result<Var> {
    let batch = g.shape(d)[0];
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, scale * scale / batch as f64)
}

/// Plain-number version of [`loss_1step`] for flat `[batch, n]` rows.
pub fn loss_1step_values(pred_next: &[f64], gt_next: &[f64], gt: &[f64], n: usize, dt: f64) -> f64 {
    let batch = gt.len() / n;
    let total: f64 = (0..gt.len())
        .map(|i| {
            let d = (gt_next[i] - gt[i]) / dt - (pred_next[i] - gt[i]) / dt;
            d * d
        })
        .sum();
    total / batch as f64
}

/// Mean squared implicit-step residual with both states taken from data.
#[allow(clippy::too_many_arguments)]
pub fn loss_dfinde(
    g: &mut Graph,
    model: &Model,
    p: &Bound,
    gt_next: Var,
    gt: Var,
    dt: f64,
    scheme: GraphScheme,
    cfg: &ProjectionConfig,
) -> Result<Var> {
    let psi = finde::base_step(g, model, p, gt, dt, scheme)?;
    let r = finde::dfinde_residual(g, model, p, gt_next, gt, dt, psi, cfg)?;
    mean_squared_rows(g, r, 1.0)
}

/// One-step prediction of the base or projected field.
#[allow(clippy::too_many_arguments)]
pub fn predict_next(
    g: &mut Graph,
    model: &Model,
    p: &Bound,
    x: Var,
    dt: f64,
    scheme: GraphScheme,
    mode: Mode,
    cfg: &ProjectionConfig,
) -> Result<Var> {
    let mut field = |g: &mut Graph, y: Var| match mode {
        Mode::Cfinde => finde::cfinde_field(g, model, p, y, cfg),
        _ => model.base.eval(g, p, y),
    };
    graph_step::step(g, scheme, &mut field, x, dt)
}

/// Graph scheme for a training integrator. Dopri5 is replayed on a uniform
/// grid whose size is the largest number of accepted adaptive steps over
/// the batch.
pub fn plan_scheme(
    model: &Model,
    states: &[f64],
    dt: f64,
    spec: &IntegratorSpec,
    mode: Mode,
    cfg: &ProjectionConfig,
) -> Result<GraphScheme> {
    Ok(match spec {
        IntegratorSpec::Euler => GraphScheme::Euler,
        IntegratorSpec::Rk4 => GraphScheme::Rk4,
        IntegratorSpec::Leapfrog => GraphScheme::Leapfrog,
        IntegratorSpec::Dopri5 { .. } => {
            let solver = Dopri5::from_spec(spec);
            let n = model.n_state();
            let mut substeps = 1;
            for u in states.chunks(n) {
                let mut f = |y: &[f64]| match mode {
                    Mode::Cfinde => finde::cfinde_field_values(model, y, cfg),
                    _ => model.base_field_values(y),
                };
                let (_, stats) = solver.integrate_with_stats(&mut f, u, &[0.0, dt])?;
                substeps = substeps.max(stats.accepted);
            }
            GraphScheme::Dopri5 { substeps }
        }
    })
}

/// Loss and its parameter gradient (one flat vector per parameter) on a
/// batch of adjacent pairs.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &Model,
    gt: &[f64],
    gt_next: &[f64],
    dt: f64,
    mode: Mode,
    scheme: GraphScheme,
    cfg: &ProjectionConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = model.n_state();
    let batch = gt.len() / n;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(Tensor::new(vec![batch, n], gt.to_vec())?);
    let y = g.constant(Tensor::new(vec![batch, n], gt_next.to_vec())?);
    let loss = match mode {
        Mode::Dfinde => loss_dfinde(&mut g, model, &p, y, x, dt, scheme, cfg)?,
        _ => {
            let pred = predict_next(&mut g, model, &p, x, dt, scheme, mode, cfg)?;
            loss_1step(&mut g, pred, y, x, dt)?
        }
    };
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = (0..model.params.len())
        .map(|i| match g.param_grad(i) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; model.params.get(i).numel()],
        })
        .collect();
    Ok((value, grads))
}

/// Largest condition estimate of `M M^T` over a batch, or `None` without a
/// bank.
pub fn gram_condition(model: &Model, states: &[f64]) -> Result<Option<f64>> {
    if model.bank.is_empty() {
        return Ok(None);
    }
    let n = model.n_state();
    let batch = states.len() / n;
    let k = model.bank.k();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(Tensor::new(vec![batch, n], states.to_vec())?);
    let t = model.bank.trace(&mut g, &p, x)?;
    let m = model.bank.jacobian(&mut g, &p, &t)?.expect("nonempty bank");
    let mt = g.transpose(m)?;
    let gram = g.matmul(m, mt)?;
    let data = g.value(gram).data();
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let a = Tensor::new(vec![k, k], data[b * k * k..(b + 1) * k * k].to_vec())?;
        worst = worst.max(Graph::spd_condition(&a, 0.0));
    }
    Ok(Some(worst))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|r| r.loss)
    }
}

/// Samples `count` adjacent pairs uniformly with replacement.
fn sample_batch(data: &TrajectorySet, count: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = data.n_state;
    let mut gt = Vec::with_capacity(count * n);
    let mut next = Vec::with_capacity(count * n);
    for _ in 0..count {
        let s = rng.random_range(0..data.n_series);
        let t = rng.random_range(0..data.n_steps);
        gt.extend_from_slice(data.state(s, t));
        next.extend_from_slice(data.state(s, t + 1));
    }
    (gt, next)
}

const BATCH_STREAM: u64 = 0xba7c;

/// Trains base and bank parameters jointly.
///
/// Parameters are only replaced after a successful step, so when training
/// aborts the model keeps the last finite parameters. With `run_dir` set,
/// `losses.csv` and periodic checkpoints are written there.
pub fn train(
    model: &mut Model,
    data: &TrajectorySet,
    cfg: &TrainConfig,
    mode: Mode,
    proj: &ProjectionConfig,
    run_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    data.validate()?;
    if model.n_state() != data.n_state {
        return Err(Error::Config(format!(
            "model width {} does not match dataset width {}",
            model.n_state(),
            data.n_state
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BATCH_STREAM);
    let mut adam = Adam::new(
        (0..model.params.len()).map(|i| model.params.get(i).numel()),
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
    );
    let mut csv = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
            w.write_record(["iteration", "lr", "loss"])?;
            Some(w)
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let abort = |iteration: usize, e: Error| Error::TrainingAborted {
        iteration,
        source: Box::new(e),
    };
    for it in 0..cfg.iterations {
        let lr = cosine_lr(it, cfg.iterations, cfg.lr);
        let (gt, next) = sample_batch(data, cfg.batch_size, &mut rng);
        let scheme = plan_scheme(model, &gt, data.dt, &cfg.integrator, mode, proj).map_err(|e| abort(it, e))?;
        let (loss, grads) = batch_loss(model, &gt, &next, data.dt, mode, scheme, proj).map_err(|e| abort(it, e))?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(abort(it, Error::NonFiniteLoss { iteration: it }));
        }
        if it % cfg.log_every == 0 {
            let cond = if mode == Mode::Base {
                None
            } else {
                gram_condition(model, &gt).ok().flatten()
            };
            match cond {
                Some(c) => log::info!("iter {it}: loss {:.4e} lr {lr:.3e} cond(MM^T) {c:.3e}", loss),
                None => log::info!("iter {it}: loss {:.4e} lr {lr:.3e}", loss),
            }
        }
        adam.step(&mut model.params, &grads, lr);
        report.losses.push(LossRecord {
            iteration: it,
            lr,
            loss,
        });
        if let Some(w) = csv.as_mut() {
            w.write_record(&[it.to_string(), format!("{lr:e}"), format!("{loss:e}")])?;
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
                let meta = serde_json::json!({ "iteration": it + 1, "mode": mode });
                checkpoint::save(&dir.join(format!("checkpoint_{:06}.finde", it + 1)), model, meta)?;
            }
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }
    if let Some(dir) = run_dir {
        let meta = serde_json::json!({ "iteration": cfg.iterations, "mode": mode });
        checkpoint::save(&dir.join("model.finde"), model, meta)?;
        let mut f = fs::File::create(dir.join("train_summary.json"))?;
        let summary = serde_json::json!({
            "iterations": cfg.iterations,
            "final_loss": report.final_loss(),
            "final_loss_scaled": report.final_loss().map(|l| l * LOSS_REPORT_SCALE),
        });
        writeln!(f, "{}", serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(report)
}
