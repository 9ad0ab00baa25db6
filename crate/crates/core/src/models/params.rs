use std::ops::Index;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named trainable tensors. The index of a parameter is also its gradient key
/// in a [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

/// Graph handles of every parameter of a store, indexed like the store.
pub struct Bound(Vec<Var>);

impl Index<usize> for Bound {
    type Output = Var;

    fn index(&self, i: usize) -> &Var {
        &self.0[i]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn set(&mut self, i: usize, value: Tensor) {
        assert_eq!(value.shape(), self.values[i].shape(), "parameter {}", self.names[i]);
        self.values[i] = Arc::new(value);
    }

    /// Mutable access; copies the tensor if a graph still holds it.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.values
                .iter()
                .enumerate()
                .map(|(i, v)| g.param(i, Arc::clone(v)))
                .collect(),
        )
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// All values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let t = Arc::make_mut(v);
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
