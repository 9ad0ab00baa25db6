//! Rollouts, valid prediction time, invariant drift and reports.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finde::{self, ProjectionConfig};
use crate::integrators::{self, IntegratorSpec};
use crate::models::{Model, ModelSpec};
use crate::systems::{InvariantCatalog, Normalization, SeriesMeta, TrajectorySet};
use crate::training::{self, Mode, TrainConfig, LOSS_REPORT_SCALE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// VPT threshold on the z-scored per-step MSE.
    pub threshold: f64,
    /// Ground truth within this many steps of the prediction may be matched.
    pub shift_window: usize,
    pub integrator: IntegratorSpec,
    /// `base` and `cfinde` integrate a field; `dfinde` chains implicit steps.
    pub mode: Mode,
    /// Pairs per series used for the 1-step error; 0 uses all of them.
    pub one_step_pairs: usize,
    pub projection: ProjectionConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            shift_window: 0,
            integrator: IntegratorSpec::Rk4,
            mode: Mode::Base,
            one_step_pairs: 100,
            projection: ProjectionConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config("VPT threshold must be positive".into()));
        }
        self.integrator.validate()?;
        self.projection.validate()
    }
}

/// Predicted states; shorter than requested when the solver failed.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<f64>,
    pub n: usize,
    /// Last step that was computed and the error that stopped the rollout.
    pub failure: Option<(usize, String)>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n..(i + 1) * self.n]
    }
}

/// One prediction step of the model in the configured mode.
pub fn predict_step(model: &Model, u: &[f64], dt: f64, cfg: &EvalConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        Mode::Dfinde => finde::dfinde_predict(model, u, dt, &cfg.integrator, &cfg.projection),
        Mode::Cfinde => {
            let mut f = |y: &[f64]| finde::cfinde_field_values(model, y, &cfg.projection);
            integrators::step(&cfg.integrator, &mut f, u, dt)
        }
        Mode::Base => {
            let mut f = |y: &[f64]| model.base_field_values(y);
            integrators::step(&cfg.integrator, &mut f, u, dt)
        }
    }
}

/// Predicts `steps` steps from `u0`. Solver errors end the rollout early
/// instead of being returned.
pub fn rollout(model: &Model, u0: &[f64], steps: usize, dt: f64, cfg: &EvalConfig) -> Rollout {
    let n = u0.len();
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(u0);
    let mut u = u0.to_vec();
    for s in 0..steps {
        match predict_step(model, &u, dt, cfg) {
            Ok(next) => {
                states.extend_from_slice(&next);
                u = next;
            }
            Err(e) => {
                log::debug!("rollout stopped at step {s}: {e}");
                return Rollout {
                    states,
                    n,
                    failure: Some((s, e.to_string())),
                };
            }
        }
    }
    Rollout {
        states,
        n,
        failure: None,
    }
}

fn zscored_mse(a: &[f64], b: &[f64], norm: &Normalization) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b)
        .zip(&norm.std)
        .map(|((x, y), s)| {
            let d = (x - y) / s;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Per-step z-scored MSE between a prediction and the ground truth, with the
/// ground truth allowed to lead or lag by up to `window` steps.
pub fn step_errors(pred: &[f64], gt: &[f64], n: usize, norm: &Normalization, window: usize) -> Vec<f64> {
    let (np, ng) = (pred.len() / n, gt.len() / n);
    (0..np)
        .map(|s| {
            let lo = s.saturating_sub(window);
            let hi = (s + window).min(ng - 1);
            (lo..=hi)
                .map(|t| zscored_mse(&pred[s * n..(s + 1) * n], &gt[t * n..(t + 1) * n], norm))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Valid prediction time: the fraction of the horizon `S = len(gt) - 1`
/// before the per-step error first reaches `threshold`. Missing predicted
/// steps count as failures.
pub fn vpt(
    pred: &[f64],
    gt: &[f64],
    n: usize,
    norm: Option<&Normalization>,
    threshold: f64,
    window: usize,
) -> Result<f64> {
    let norm = norm.ok_or_else(|| Error::Dataset("VPT needs normalization statistics".into()))?;
    let horizon = gt.len() / n - 1;
    if horizon == 0 {
        return Err(Error::Config("VPT needs at least one step".into()));
    }
    let errors = step_errors(pred, gt, n, norm, window);
    let mut last_valid = 0;
    for (s, e) in errors.iter().enumerate().skip(1) {
        if *e < threshold {
            last_valid = s;
        } else {
            break;
        }
    }
    Ok(last_valid.min(horizon) as f64 / horizon as f64)
}

/// `|V(u_s) - V(u_0)|` along a trajectory.
pub fn drift_curve(states: &[f64], n: usize, eval: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let v0 = eval(&states[..n]);
    states.chunks(n).map(|u| (eval(u) - v0).abs()).collect()
}

/// Drift curves of every catalog entry.
pub fn invariant_drift(
    states: &[f64],
    n: usize,
    catalog: &InvariantCatalog,
    meta: &SeriesMeta,
) -> Vec<(String, Vec<f64>)> {
    catalog
        .entries
        .iter()
        .map(|e| (e.name.to_string(), drift_curve(states, n, |u| e.eval(u, meta))))
        .collect()
}

/// Drift curves of the learned and analytic bank components.
pub fn bank_drift(model: &Model, states: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = model.bank.k();
    let values = model.bank_values(states)?;
    let count = values.len() / k.max(1);
    Ok((0..k)
        .map(|i| (0..count).map(|s| (values[s * k + i] - values[i]).abs()).collect())
        .collect())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    pub series: usize,
    pub vpt: f64,
    /// Raw 1-step error (not scaled).
    pub one_step: f64,
    pub failure_step: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub series: Vec<SeriesResult>,
    pub median_vpt: f64,
    pub std_vpt: f64,
    pub median_one_step: f64,
    pub median_one_step_scaled: f64,
    pub failures: usize,
    /// Per catalog entry, the largest drift over series at each step.
    pub drift: Vec<(String, Vec<f64>)>,
    /// Largest drift of any bank component over all rollouts.
    pub max_bank_drift: Option<f64>,
}

/// 1-step error of the model over up to `pairs` evenly spaced pairs of one
/// series.
pub fn one_step_error(model: &Model, data: &TrajectorySet, series: usize, cfg: &EvalConfig) -> Result<f64> {
    let steps = data.n_steps;
    let pairs = if cfg.one_step_pairs == 0 {
        steps
    } else {
        cfg.one_step_pairs.min(steps)
    };
    let n = data.n_state;
    let mut gt = Vec::with_capacity(pairs * n);
    let mut next = Vec::with_capacity(pairs * n);
    let mut pred = Vec::with_capacity(pairs * n);
    for j in 0..pairs {
        let s = j * steps / pairs;
        let u = data.state(series, s);
        gt.extend_from_slice(u);
        next.extend_from_slice(data.state(series, s + 1));
        pred.extend(predict_step(model, u, data.dt, cfg)?);
    }
    Ok(training::loss_1step_values(&pred, &next, &gt, n, data.dt))
}

/// Evaluates rollouts from the first state of every series.
pub fn evaluate(model: &Model, data: &TrajectorySet, norm: &Normalization, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let n = data.n_state;
    let catalog = data.system.catalog();
    type SeriesOutput = (SeriesResult, Vec<(String, Vec<f64>)>, Option<f64>);
    let per_series: Vec<Result<SeriesOutput>> = (0..data.n_series)
        .into_par_iter()
        .map(|i| {
            let gt = data.series(i);
            let r = rollout(model, &gt[..n], data.n_steps, data.dt, cfg);
            let v = vpt(&r.states, gt, n, Some(norm), cfg.threshold, cfg.shift_window)?;
            let one_step = one_step_error(model, data, i, cfg).unwrap_or(f64::NAN);
            let drift = invariant_drift(&r.states, n, &catalog, &data.metadata[i]);
            let bank = if model.bank.is_empty() {
                None
            } else {
                bank_drift(model, &r.states)
                    .ok()
                    .map(|curves| curves.iter().flatten().fold(0.0, |a: f64, b| a.max(*b)))
            };
            let (failure_step, failure) = match r.failure {
                Some((s, e)) => (Some(s), Some(e)),
                None => (None, None),
            };
            Ok((
                SeriesResult {
                    series: i,
                    vpt: v,
                    one_step,
                    failure_step,
                    failure,
                },
                drift,
                bank,
            ))
        })
        .collect();
    let mut series = Vec::with_capacity(data.n_series);
    let mut drift: Vec<(String, Vec<f64>)> = catalog
        .names()
        .into_iter()
        .map(|name| (name.to_string(), vec![0.0; data.n_steps + 1]))
        .collect();
    let mut max_bank: Option<f64> = None;
    for r in per_series {
        let (s, d, b) = r?;
        for ((_, acc), (_, curve)) in drift.iter_mut().zip(d) {
            for (a, c) in acc.iter_mut().zip(curve) {
                *a = a.max(c);
            }
        }
        if let Some(b) = b {
            max_bank = Some(max_bank.unwrap_or(0.0).max(b));
        }
        series.push(s);
    }
    let vpts: Vec<f64> = series.iter().map(|s| s.vpt).collect();
    let ones: Vec<f64> = series.iter().map(|s| s.one_step).filter(|v| v.is_finite()).collect();
    let median_one_step = median(&ones);
    Ok(EvalReport {
        median_vpt: median(&vpts),
        std_vpt: std_dev(&vpts),
        median_one_step,
        median_one_step_scaled: median_one_step * LOSS_REPORT_SCALE,
        failures: series.iter().filter(|s| s.failure.is_some()).count(),
        series,
        drift,
        max_bank_drift: max_bank,
    })
}

impl EvalReport {
    /// Writes `report.json`, `report.csv` and one `drift_<name>.csv` per
    /// invariant into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let summary = serde_json::json!({
            "median_vpt": self.median_vpt,
            "std_vpt": self.std_vpt,
            "median_one_step": self.median_one_step,
            "median_one_step_scaled": self.median_one_step_scaled,
            "failures": self.failures,
            "n_series": self.series.len(),
            "max_bank_drift": self.max_bank_drift,
            "max_invariant_drift": self.drift.iter().map(|(name, c)| {
                (name.clone(), c.iter().cloned().fold(0.0, f64::max))
            }).collect::<std::collections::BTreeMap<_, _>>(),
        });
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record([
            "series",
            "vpt",
            "one_step",
            "one_step_scaled",
            "failure_step",
            "failure",
        ])?;
        for s in &self.series {
            w.write_record(&[
                s.series.to_string(),
                s.vpt.to_string(),
                format!("{:e}", s.one_step),
                format!("{:e}", s.one_step * LOSS_REPORT_SCALE),
                s.failure_step.map(|v| v.to_string()).unwrap_or_default(),
                s.failure.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        for (name, curve) in &self.drift {
            let mut w = csv::Writer::from_path(dir.join(format!("drift_{name}.csv")))?;
            w.write_record(["step", "value"])?;
            for (i, v) in curve.iter().enumerate() {
                w.write_record(&[i.to_string(), format!("{v:e}")])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// What one K-sweep trains and evaluates.
#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub ks: Vec<usize>,
    pub trials: usize,
    /// Mode for rows with K > 0; the K = 0 row always uses the base model.
    pub mode: Mode,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Training series used for the train-split evaluation.
    pub train_eval_series: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub mean_vpt: f64,
    pub mean_one_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub k: usize,
    pub trial: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
    /// Iteration at which training stopped, when it did not finish.
    pub failed_iteration: Option<usize>,
    pub failure: Option<String>,
    pub train: SplitScore,
    pub test: SplitScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub median_train_vpt: f64,
    pub median_test_vpt: f64,
    pub median_train_one_step: f64,
    pub median_test_one_step: f64,
    pub failures: usize,
    pub trials: Vec<TrialResult>,
}

fn score(model: &Model, data: &TrajectorySet, norm: &Normalization, cfg: &EvalConfig) -> Result<SplitScore> {
    let r = evaluate(model, data, norm, cfg)?;
    let vpts: Vec<f64> = r.series.iter().map(|s| s.vpt).collect();
    let ones: Vec<f64> = r.series.iter().map(|s| s.one_step).filter(|v| v.is_finite()).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(SplitScore {
        mean_vpt: mean(&vpts),
        mean_one_step: mean(&ones),
    })
}

/// Trains one model per `(K, trial)` and scores it on both splits.
/// Training failures are recorded and the model is scored with its last
/// finite parameters.
pub fn ksweep(
    train: &TrajectorySet,
    test: &TrajectorySet,
    norm: &Normalization,
    make_spec: impl Fn(usize, u64) -> Result<ModelSpec>,
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>> {
    if settings.ks.is_empty() || settings.trials == 0 {
        return Err(Error::Config("sweep needs at least one K and one trial".into()));
    }
    let train_eval = train.subset(settings.train_eval_series.min(train.n_series));
    let mut rows = Vec::with_capacity(settings.ks.len());
    for &k in &settings.ks {
        let mode = if k == 0 { Mode::Base } else { settings.mode };
        let eval_cfg = EvalConfig {
            mode,
            ..settings.eval.clone()
        };
        let mut trials = Vec::with_capacity(settings.trials);
        for trial in 0..settings.trials {
            let seed = settings.train.seed + trial as u64;
            let mut model = Model::new(make_spec(k, seed)?)?;
            let cfg = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let (final_loss, failed_iteration, failure) =
                match training::train(&mut model, train, &cfg, mode, &eval_cfg.projection, None) {
                    Ok(r) => (r.final_loss(), None, None),
                    Err(Error::TrainingAborted { iteration, source }) => {
                        log::warn!("K={k} trial {trial} failed at iteration {iteration}: {source}");
                        (None, Some(iteration), Some(source.to_string()))
                    }
                    Err(e) => return Err(e),
                };
            let train_score = score(&model, &train_eval, norm, &eval_cfg)?;
            let test_score = score(&model, test, norm, &eval_cfg)?;
            log::info!(
                "K={k} trial {trial}: train VPT {:.3} test VPT {:.3}",
                train_score.mean_vpt,
                test_score.mean_vpt
            );
            trials.push(TrialResult {
                k,
                trial,
                seed,
                final_loss,
                failed_iteration,
                failure,
                train: train_score,
                test: test_score,
            });
        }
        let pick = |f: fn(&TrialResult) -> f64| median(&trials.iter().map(f).collect::<Vec<_>>());
        rows.push(SweepRow {
            k,
            median_train_vpt: pick(|t| t.train.mean_vpt),
            median_test_vpt: pick(|t| t.test.mean_vpt),
            median_train_one_step: pick(|t| t.train.mean_one_step),
            median_test_one_step: pick(|t| t.test.mean_one_step),
            failures: trials.iter().filter(|t| t.failure.is_some()).count(),
            trials,
        });
    }
    Ok(rows)
}

/// One line per K with medians over trials, 1-step errors in the reported
/// scale.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "K",
        "train_one_step_scaled",
        "train_vpt",
        "test_one_step_scaled",
        "test_vpt",
        "failures",
        "trials",
    ])?;
    for r in rows {
        w.write_record(&[
            r.k.to_string(),
            format!("{:.6e}", r.median_train_one_step * LOSS_REPORT_SCALE),
            format!("{:.4}", r.median_train_vpt),
            format!("{:.6e}", r.median_test_one_step * LOSS_REPORT_SCALE),
            format!("{:.4}", r.median_test_vpt),
            r.failures.to_string(),
            r.trials.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
