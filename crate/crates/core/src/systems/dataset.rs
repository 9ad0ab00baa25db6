use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SeriesMeta, SystemKind};
use crate::error::{Error, Result};
use crate::integrators::IntegratorSpec;

/// Per-element mean and standard deviation of a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Z-scores one state.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    system: SystemKind,
    n_state: usize,
    n_series: usize,
    n_steps: usize,
    dt: f64,
    seed: u64,
    generator_tolerances: IntegratorSpec,
    normalization: Option<Normalization>,
    series_metadata: Vec<SeriesMeta>,
}

/// Series on a common uniform grid; `data` is `[series][step][state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub system: SystemKind,
    pub n_state: usize,
    pub n_series: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub integrator: IntegratorSpec,
    pub data: Vec<f64>,
    pub metadata: Vec<SeriesMeta>,
    pub normalization: Option<Normalization>,
}

const MANIFEST: &str = "manifest.json";
const DATA: &str = "data.f64";

impl TrajectorySet {
    pub fn series_len(&self) -> usize {
        (self.n_steps + 1) * self.n_state
    }

    pub fn series(&self, i: usize) -> &[f64] {
        let len = self.series_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn state(&self, series: usize, step: usize) -> &[f64] {
        let start = series * self.series_len() + step * self.n_state;
        &self.data[start..start + self.n_state]
    }

    /// The first `count` series.
    pub fn subset(&self, count: usize) -> Self {
        let count = count.min(self.n_series);
        Self {
            n_series: count,
            data: self.data[..count * self.series_len()].to_vec(),
            metadata: self.metadata[..count].to_vec(),
            ..self.clone()
        }
    }

    pub fn compute_normalization(&self) -> Normalization {
        let n = self.n_state;
        let count = (self.data.len() / n) as f64;
        let mut mean = vec![0.0; n];
        for u in self.data.chunks(n) {
            for (m, x) in mean.iter_mut().zip(u) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for u in self.data.chunks(n) {
            for ((v, x), m) in var.iter_mut().zip(u).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_state != self.system.n_state() {
            return Err(Error::Dataset(format!(
                "{} needs state width {}, manifest says {}",
                self.system,
                self.system.n_state(),
                self.n_state
            )));
        }
        if self.data.len() != self.n_series * self.series_len() {
            return Err(Error::Dataset(format!(
                "expected {} values, found {}",
                self.n_series * self.series_len(),
                self.data.len()
            )));
        }
        if self.metadata.len() != self.n_series {
            return Err(Error::Dataset("series metadata count does not match n_series".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Dataset("dt must be positive".into()));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Dataset(format!("non-finite value at flat index {i}")));
        }
        Ok(())
    }

    /// Writes `manifest.json` and `data.f64` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            system: self.system,
            n_state: self.n_state,
            n_series: self.n_series,
            n_steps: self.n_steps,
            dt: self.dt,
            seed: self.seed,
            generator_tolerances: self.integrator,
            normalization: self.normalization.clone(),
            series_metadata: self.metadata.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(DATA))?);
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let bytes =
            fs::read(dir.join(DATA)).map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(DATA).display())))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Dataset("data file length is not a multiple of 8".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let set = TrajectorySet {
            system: m.system,
            n_state: m.n_state,
            n_series: m.n_series,
            n_steps: m.n_steps,
            dt: m.dt,
            seed: m.seed,
            integrator: m.generator_tolerances,
            data,
            metadata: m.series_metadata,
            normalization: m.normalization,
        };
        set.validate()?;
        Ok(set)
    }
}
