//! Field models and the first-integral bank.

mod bank;
pub mod checkpoint;
mod field;
pub mod init;
mod network;
mod params;

pub use bank::{Bank, BankTrace, Polynomial, SeparableTerm};
pub use field::{BaseField, Scalar};
pub use network::{Arch, Head, Network, Trace};
pub use params::{Bound, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseSpec {
    Node,
    Hnn,
    SecondOrder,
    /// Fixed linear field `A u`, no parameters.
    Linear {
        matrix: Vec<Vec<f64>>,
    },
}

/// Everything needed to rebuild a model's structure; parameters come from
/// the seed or a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_state: usize,
    pub base: BaseSpec,
    pub arch: Arch,
    /// Number of learned first integrals.
    pub k: usize,
    /// Bank architecture; the base architecture when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_arch: Option<Arch>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub analytic: Vec<Polynomial>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub base: BaseField,
    pub bank: Bank,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let n = spec.n_state;
        if n == 0 {
            return Err(Error::Config("state width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::new();
        let base = match &spec.base {
            BaseSpec::Node => BaseField::Node(Network::new(
                &mut params,
                "base",
                &spec.arch,
                n,
                Head::Vector(n),
                &mut rng,
            )?),
            BaseSpec::Hnn => {
                if !n.is_multiple_of(2) {
                    return Err(Error::Config("an HNN needs an even state width".into()));
                }
                BaseField::Hnn(Scalar::Learned(Network::new(
                    &mut params,
                    "base",
                    &spec.arch,
                    n,
                    Head::Scalars(1),
                    &mut rng,
                )?))
            }
            BaseSpec::SecondOrder => {
                if !n.is_multiple_of(2) {
                    return Err(Error::Config("a second-order model needs an even state width".into()));
                }
                BaseField::SecondOrder(Network::new(
                    &mut params,
                    "base",
                    &spec.arch,
                    n,
                    Head::Vector(n / 2),
                    &mut rng,
                )?)
            }
            BaseSpec::Linear { matrix } => {
                let a = Tensor::matrix(matrix)?;
                if a.shape() != [n, n] {
                    return Err(Error::Config(format!("linear field must be {n} x {n}")));
                }
                BaseField::Linear(a)
            }
        };
        let learned = if spec.k > 0 {
            let arch = spec.bank_arch.as_ref().unwrap_or(&spec.arch);
            Some(Network::new(
                &mut params,
                "bank",
                arch,
                n,
                Head::Scalars(spec.k),
                &mut rng,
            )?)
        } else {
            None
        };
        let bank = Bank::new(learned, spec.analytic.clone(), n)?;
        Ok(Self {
            spec,
            params,
            base,
            bank,
        })
    }

    pub fn n_state(&self) -> usize {
        self.spec.n_state
    }

    /// Base field at a batch of states (`states.len()` a multiple of N),
    /// without gradient bookkeeping.
    pub fn base_field_values(&self, states: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_state();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(Tensor::new(vec![states.len() / n, n], states.to_vec())?);
        let f = self.base.eval(&mut g, &p, x)?;
        Ok(g.value(f).data().to_vec())
    }

    /// Bank values `[batch, K]` at a batch of states.
    pub fn bank_values(&self, states: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_state();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(Tensor::new(vec![states.len() / n, n], states.to_vec())?);
        let t = self.bank.trace(&mut g, &p, x)?;
        Ok(match self.bank.values(&mut g, &t)? {
            Some(v) => g.value(v).data().to_vec(),
            None => Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(base: BaseSpec, k: usize) -> ModelSpec {
        ModelSpec {
            n_state: 4,
            base,
            arch: Arch::mlp(&[16, 16]),
            k,
            bank_arch: None,
            analytic: Vec::new(),
            seed: 3,
        }
    }

    #[test]
    fn second_order_passes_velocity_through() {
        let m = Model::new(spec(BaseSpec::SecondOrder, 0)).unwrap();
        let u = [0.1, -0.4, 1.3, -2.2, 0.7, 0.0, 0.5, 0.9];
        let f = m.base_field_values(&u).unwrap();
        assert_eq!(&f[0..2], &u[2..4]);
        assert_eq!(&f[4..6], &u[6..8]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(spec(BaseSpec::Hnn, 2)).unwrap();
        let b = Model::new(spec(BaseSpec::Hnn, 2)).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.bank.k(), 2);
    }
}
