//! Run configuration: one JSON document layered over a per-system preset.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::finde::ProjectionConfig;
use crate::integrators::IntegratorSpec;
use crate::models::{Arch, BaseSpec, ModelSpec};
use crate::systems::{SystemKind, SystemSpec};
use crate::training::{Mode, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseKind {
    Node,
    Hnn,
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindeKind {
    None,
    Cfinde,
    Dfinde,
}

impl FindeKind {
    pub fn mode(self) -> Mode {
        match self {
            FindeKind::None => Mode::Base,
            FindeKind::Cfinde => Mode::Cfinde,
            FindeKind::Dfinde => Mode::Dfinde,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: SystemKind,
    pub dt: f64,
    pub train_series: usize,
    pub train_steps: usize,
    pub test_series: usize,
    pub test_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base: BaseKind,
    pub arch: Arch,
    /// Number of learned first integrals.
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_arch: Option<Arch>,
    /// Known first integrals added to the bank, by catalog name.
    #[serde(default)]
    pub analytic_invariants: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub shift_window: usize,
    pub one_step_pairs: usize,
    pub projection: ProjectionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub ks: Vec<usize>,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset root holding `train/` and `test/`.
    pub data: PathBuf,
    /// Run directory for checkpoints, losses and reports.
    pub run: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub model: ModelSection,
    pub finde: FindeKind,
    /// One-step predictor for training and rollout integrator for evaluation.
    pub integrator: IntegratorSpec,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
    pub seed: u64,
    pub scale: Scale,
}

/// Hidden width used at desk scale.
pub const DESK_WIDTH: usize = 100;
/// Hidden width used at paper scale.
pub const PAPER_WIDTH: usize = 200;

impl RunConfig {
    /// Defaults for a system at a scale.
    pub fn preset(system: SystemKind, scale: Scale) -> Self {
        let paper = scale == Scale::Paper;
        // (dt, eval steps at paper scale, paper iterations)
        let (dt, eval_steps, paper_iters) = match system {
            SystemKind::MassSpring => (0.1, 5000, 10_000),
            SystemKind::TwoBody => (0.01, 10_000, 100_000),
            SystemKind::Kdv => (0.001, 10_000, 30_000),
            SystemKind::DoublePendulum => (0.1, 5000, 100_000),
            SystemKind::FitzHughNagumo => (0.1, 2000, 30_000),
        };
        let width = if paper { PAPER_WIDTH } else { DESK_WIDTH };
        let arch = match system {
            SystemKind::Kdv => Arch::Cnn {
                channels: vec![width / 4, width / 4],
                kernel: 3,
            },
            _ => Arch::mlp(&[width, width]),
        };
        let base = match system {
            SystemKind::TwoBody => BaseKind::Hnn,
            SystemKind::DoublePendulum => BaseKind::SecondOrder,
            _ => BaseKind::Node,
        };
        let system_section = SystemSection {
            name: system,
            dt,
            train_series: if paper { 1000 } else { 100 },
            train_steps: if paper { 500 } else { 200 },
            test_series: 10,
            test_steps: if paper { eval_steps } else { eval_steps / 5 },
        };
        RunConfig {
            system: system_section,
            model: ModelSection {
                base,
                arch,
                k: 0,
                bank_arch: None,
                analytic_invariants: Vec::new(),
            },
            finde: FindeKind::None,
            integrator: IntegratorSpec::Rk4,
            train: TrainSection {
                iterations: if paper { paper_iters } else { 3000 },
                batch_size: 200,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                checkpoint_every: 0,
                log_every: 100,
            },
            eval: EvalSection {
                threshold: 0.01,
                shift_window: if system == SystemKind::FitzHughNagumo { 5 } else { 0 },
                one_step_pairs: 100,
                projection: ProjectionConfig::default(),
            },
            sweep: SweepSection {
                ks: (0..=3).collect(),
                trials: 3,
            },
            paths: PathsSection {
                data: PathBuf::from("data").join(system.name()),
                run: PathBuf::from("runs").join(system.name()),
            },
            seed: 0,
            scale,
        }
    }

    /// Layers a user document over the preset named by its `system` and
    /// `scale`. Unknown keys anywhere are rejected.
    pub fn from_value(user: Value, scale_override: Option<Scale>) -> Result<Self> {
        let obj = user
            .as_object()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let system = match obj.get("system") {
            Some(Value::String(s)) => SystemKind::from_name(s)?,
            Some(Value::Object(o)) => match o.get("name") {
                Some(Value::String(s)) => SystemKind::from_name(s)?,
                _ => return Err(Error::Config("system.name must be a string".into())),
            },
            _ => return Err(Error::Config("missing \"system\"".into())),
        };
        let scale = match scale_override {
            Some(s) => s,
            None => match obj.get("scale") {
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("scale: {e}")))?,
                None => Scale::Desk,
            },
        };
        let mut user = user;
        if let Some(Value::String(_)) = user.get("system") {
            user["system"] = serde_json::json!({ "name": system });
        }
        user["scale"] = serde_json::to_value(scale)?;
        let mut merged = serde_json::to_value(Self::preset(system, scale))?;
        merge(&mut merged, user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, scale_override: Option<Scale>) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(v, scale_override)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if !(s.dt > 0.0) || s.train_series == 0 || s.train_steps == 0 || s.test_series == 0 || s.test_steps == 0 {
            return Err(Error::Config("system sizes and dt must be positive".into()));
        }
        if self.sweep.trials == 0 || self.sweep.ks.is_empty() {
            return Err(Error::Config("sweep needs at least one K and one trial".into()));
        }
        if self.finde != FindeKind::None && self.model.k == 0 && self.model.analytic_invariants.is_empty() {
            log::warn!("finde is enabled but the bank is empty; the base model is used unchanged");
        }
        self.train_config().validate()?;
        self.eval_config().validate()?;
        self.model_spec(self.model.k, self.seed).map(|_| ())
    }

    pub fn train_spec(&self) -> SystemSpec {
        SystemSpec {
            system: self.system.name,
            dt: self.system.dt,
            steps: self.system.train_steps,
            n_series: self.system.train_series,
            seed: self.seed,
        }
    }

    pub fn test_spec(&self) -> SystemSpec {
        SystemSpec {
            steps: self.system.test_steps,
            n_series: self.system.test_series,
            ..self.train_spec()
        }
    }

    /// Model structure with `k` learned integrals and the configured
    /// analytic ones.
    pub fn model_spec(&self, k: usize, seed: u64) -> Result<ModelSpec> {
        let system = self.system.name;
        let analytic = self
            .model
            .analytic_invariants
            .iter()
            .map(|name| system.polynomial_invariant(name))
            .collect::<Result<Vec<_>>>()?;
        let base = match self.model.base {
            BaseKind::Node => BaseSpec::Node,
            BaseKind::Hnn => BaseSpec::Hnn,
            BaseKind::SecondOrder => BaseSpec::SecondOrder,
        };
        Ok(ModelSpec {
            n_state: system.n_state(),
            base,
            arch: self.model.arch.clone(),
            k,
            bank_arch: self.model.bank_arch.clone(),
            analytic,
            seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: self.seed,
            integrator: self.integrator,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            threshold: self.eval.threshold,
            shift_window: self.eval.shift_window,
            integrator: self.integrator,
            mode: self.finde.mode(),
            one_step_pairs: self.eval.one_step_pairs,
            projection: self.eval.projection,
        }
    }
}

/// Recursive object merge. A tagged object (one with `kind`) whose tag
/// changes is replaced wholesale.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if o.get("kind").is_some() && o.get("kind") != b.get("kind") {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
