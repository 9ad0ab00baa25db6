use super::bank::Polynomial;
use super::network::Network;
use super::params::Bound;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A scalar function of the state: a one-output network or a polynomial.
#[derive(Clone, Debug)]
pub enum Scalar {
    Learned(Network),
    Analytic(Polynomial),
}

impl Scalar {
    /// Gradient as `[batch, n]`.
    pub fn gradient(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let (batch, n) = (g.shape(x)[0], g.shape(x)[1]);
        let rows = match self {
            Scalar::Learned(net) => {
                let t = net.forward(g, p, x)?;
                net.jacobian(g, p, &t)?
            }
            Scalar::Analytic(poly) => poly.gradient(g, x)?,
        };
        g.reshape(rows, &[batch, n])
    }
}

/// The unprojected vector field.
#[derive(Clone, Debug)]
pub enum BaseField {
    /// The network output is the time derivative.
    Node(Network),
    /// Canonical Hamiltonian field `(dH/dp, -dH/dq)` for states `(q, p)`.
    Hnn(Scalar),
    /// States `(q, v)`; the network supplies the acceleration only.
    SecondOrder(Network),
    /// `f(u) = A u`.
    Linear(Tensor),
}

impl BaseField {
    /// `x: [batch, N]` to `[batch, N]`.
    pub fn eval(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = match g.shape(x) {
            [_, n] => *n,
            s => return Err(Error::shape(x.id(), "base-field", format!("{s:?}"))),
        };
        match self {
            BaseField::Node(net) => Ok(net.forward(g, p, x)?.output),
            BaseField::Hnn(h) => {
                if n % 2 != 0 {
                    return Err(Error::Config("canonical field needs an even state width".into()));
                }
                let grad = h.gradient(g, p, x)?;
                let j = g.constant(canonical_map(n / 2));
                g.matmul(grad, j)
            }
            BaseField::SecondOrder(net) => {
                if n % 2 != 0 {
                    return Err(Error::Config("second-order field needs an even state width".into()));
                }
                let v = g.slice(x, 1, n / 2, n / 2)?;
                let a = net.forward(g, p, x)?.output;
                g.concat(v, a, 1)
            }
            BaseField::Linear(a) => {
                let at = g.constant(a.clone());
                let at = g.transpose(at)?;
                g.matmul(x, at)
            }
        }
    }
}

/// `C` with `grad H * C = (dH/dp, -dH/dq)` for row vectors.
fn canonical_map(n: usize) -> Tensor {
    let mut c = Tensor::zeros(&[2 * n, 2 * n]);
    for i in 0..n {
        c.data_mut()[(n + i) * 2 * n + i] = 1.0;
        c.data_mut()[i * 2 * n + n + i] = -1.0;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamStore;

    #[test]
    fn harmonic_oscillator_hamiltonian_field() {
        let field = BaseField::Hnn(Scalar::Analytic(Polynomial::half_squared_norm("H", 2)));
        let mut g = Graph::new();
        let p = ParamStore::new().bind(&mut g);
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let f = field.eval(&mut g, &p, x).unwrap();
        assert_eq!(g.value(f).data(), &[0.0, -1.0]);
    }

    #[test]
    fn linear_field_is_matrix_vector_product() {
        let a = Tensor::matrix(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let field = BaseField::Linear(a);
        let mut g = Graph::new();
        let p = ParamStore::new().bind(&mut g);
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 2.0]).unwrap());
        let f = field.eval(&mut g, &p, x).unwrap();
        assert_eq!(g.value(f).data(), &[0.0, -1.0, 2.0, -0.5]);
    }
}
