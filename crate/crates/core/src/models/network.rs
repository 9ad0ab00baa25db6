//! Tanh networks with explicit Jacobian and discrete-Jacobian construction.
//!
//! Activations are carried as `[batch, features]`; convolution layers view
//! their features as `[channels, sites]`. Jacobians are assembled right to
//! left as `[batch, outputs, features]` blocks, so every factor is an ordinary
//! graph op and parameter gradients flow through them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::orthogonal;
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Arch {
    /// Fully connected, tanh after every hidden layer.
    Mlp { hidden: Vec<usize> },
    /// Circular 1-D convolutions over the state, read as one channel.
    Cnn { channels: Vec<usize>, kernel: usize },
}

impl Arch {
    pub fn mlp(hidden: &[usize]) -> Self {
        Arch::Mlp {
            hidden: hidden.to_vec(),
        }
    }
}

/// What the last layer produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// A vector of the given width. For a CNN the width must equal the
    /// number of sites (one output channel).
    Vector(usize),
    /// The given number of scalars. A CNN sums each output channel over sites.
    Scalars(usize),
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        w: usize,
        b: usize,
    },
    Conv {
        w: usize,
        b: usize,
        cin: usize,
        cout: usize,
        sites: usize,
    },
    Tanh,
    SumSites {
        channels: usize,
        sites: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<Layer>,
    n_in: usize,
    n_out: usize,
}

/// Forward pass of a network with the pre-activations the Jacobians need.
pub struct Trace {
    pub output: Var,
    pre: Vec<Var>,
    batch: usize,
}

impl Network {
    /// Registers the parameters of a new network in `store` under `name`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        arch: &Arch,
        n_in: usize,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let n_out;
        match arch {
            Arch::Mlp { hidden } => {
                let width = match head {
                    Head::Vector(w) | Head::Scalars(w) => w,
                };
                let mut sizes = vec![n_in];
                sizes.extend_from_slice(hidden);
                sizes.push(width);
                for (i, pair) in sizes.windows(2).enumerate() {
                    let (fi, fo) = (pair[0], pair[1]);
                    if fi == 0 || fo == 0 {
                        return Err(Error::Config(format!("{name}: zero-width layer")));
                    }
                    if i > 0 {
                        layers.push(Layer::Tanh);
                    }
                    let w = store.push(format!("{name}.dense{i}.weight"), orthogonal(fi, fo, rng));
                    let b = store.push(format!("{name}.dense{i}.bias"), Tensor::zeros(&[fo]));
                    layers.push(Layer::Dense { w, b });
                }
                n_out = width;
            }
            Arch::Cnn { channels, kernel } => {
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("{name}: kernel size must be odd")));
                }
                let sites = n_in;
                let (out_channels, pooled) = match head {
                    Head::Vector(w) if w == sites => (1, false),
                    Head::Vector(w) => {
                        return Err(Error::Config(format!(
                            "{name}: a CNN maps {sites} sites to {sites} outputs, not {w}"
                        )))
                    }
                    Head::Scalars(k) => (k, true),
                };
                let mut chans = vec![1];
                chans.extend_from_slice(channels);
                chans.push(out_channels);
                for (i, pair) in chans.windows(2).enumerate() {
                    let (cin, cout) = (pair[0], pair[1]);
                    if cin == 0 || cout == 0 {
                        return Err(Error::Config(format!("{name}: zero-width layer")));
                    }
                    if i > 0 {
                        layers.push(Layer::Tanh);
                    }
                    let flat = orthogonal(cout, cin * kernel, rng);
                    let w = store.push(
                        format!("{name}.conv{i}.weight"),
                        flat.reshape(vec![cout, cin, *kernel])?,
                    );
                    let b = store.push(format!("{name}.conv{i}.bias"), Tensor::zeros(&[cout]));
                    layers.push(Layer::Conv { w, b, cin, cout, sites });
                }
                if pooled {
                    layers.push(Layer::SumSites {
                        channels: out_channels,
                        sites,
                    });
                    n_out = out_channels;
                } else {
                    n_out = sites;
                }
            }
        }
        Ok(Self { layers, n_in, n_out })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// `x: [batch, n_in]` to `[batch, n_out]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Trace> {
        let batch = match g.shape(x) {
            [b, n] if *n == self.n_in => *b,
            s => {
                return Err(Error::shape(
                    x.id(),
                    "network",
                    format!("expected [batch, {}], got {s:?}", self.n_in),
                ))
            }
        };
        let mut h = x;
        let mut pre = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { w, b } => {
                    let z = g.matmul(h, p[w])?;
                    g.add_bias(z, p[b])?
                }
                Layer::Conv { w, b, cin, cout, sites } => {
                    let z = g.reshape(h, &[batch, cin, sites])?;
                    let z = g.conv1d(z, p[w], Some(p[b]))?;
                    g.reshape(z, &[batch, cout * sites])?
                }
                Layer::Tanh => {
                    pre.push(h);
                    g.tanh(h)?
                }
                Layer::SumSites { channels, sites } => {
                    let z = g.reshape(h, &[batch, channels, sites])?;
                    g.sum_last(z)?
                }
            };
        }
        Ok(Trace { output: h, pre, batch })
    }

    /// Jacobian of the outputs with respect to the inputs, `[batch, n_out, n_in]`.
    pub fn jacobian(&self, g: &mut Graph, p: &Bound, trace: &Trace) -> Result<Var> {
        let diags = trace.pre.iter().map(|&z| g.tanh_deriv(z)).collect::<Result<Vec<_>>>()?;
        self.pullback(g, p, trace.batch, &diags)
    }

    /// Discrete Jacobian between the traced points `v` and `u`: every tanh
    /// factor is replaced by the slope diagonal between the paired
    /// pre-activations, linear factors are kept.
    pub fn discrete_jacobian(&self, g: &mut Graph, p: &Bound, v: &Trace, u: &Trace) -> Result<Var> {
        assert_eq!(v.batch, u.batch);
        let diags = u
            .pre
            .iter()
            .zip(&v.pre)
            .map(|(&a, &b)| g.tanh_slope(a, b))
            .collect::<Result<Vec<_>>>()?;
        self.pullback(g, p, v.batch, &diags)
    }

    /// Product of the layer Jacobians, with `diags[i]` standing in for the
    /// derivative of the i-th tanh layer.
    fn pullback(&self, g: &mut Graph, p: &Bound, batch: usize, diags: &[Var]) -> Result<Var> {
        let rows = self.n_out;
        let seed = g.constant(Tensor::identity(rows));
        let mut acc = g.tile(seed, batch)?;
        let mut width = rows;
        let mut tanh_index = diags.len();
        for layer in self.layers.iter().rev() {
            acc = match *layer {
                Layer::Dense { w, .. } => {
                    let fan_in = g.shape(p[w])[0];
                    let flat = g.reshape(acc, &[batch * rows, width])?;
                    let wt = g.transpose(p[w])?;
                    let prod = g.matmul(flat, wt)?;
                    width = fan_in;
                    g.reshape(prod, &[batch, rows, width])?
                }
                Layer::Tanh => {
                    tanh_index -= 1;
                    g.scale_columns(acc, diags[tanh_index])?
                }
                Layer::Conv {
                    w, cin, cout, sites, ..
                } => {
                    let flat = g.reshape(acc, &[batch * rows, cout, sites])?;
                    let wa = g.conv_adjoint_weight(p[w])?;
                    let prod = g.conv1d(flat, wa, None)?;
                    width = cin * sites;
                    g.reshape(prod, &[batch, rows, width])?
                }
                Layer::SumSites { sites, .. } => {
                    width *= sites;
                    g.repeat_last(acc, sites)?
                }
            };
        }
        debug_assert_eq!(width, self.n_in);
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value(net: &Network, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
        let t = net.forward(&mut g, &p, xv).unwrap();
        g.value(t.output).data().to_vec()
    }

    #[test]
    fn single_linear_layer_jacobian_is_the_weight() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(&mut store, "v", &Arch::mlp(&[]), 3, Head::Scalars(1), &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.3, -2.0, 1.1]).unwrap());
        let t = net.forward(&mut g, &p, x).unwrap();
        let m = net.jacobian(&mut g, &p, &t).unwrap();
        assert_eq!(g.shape(m), &[1, 1, 3]);
        assert_eq!(g.value(m).data(), store.get(0).data());
    }

    #[test]
    fn cnn_preserves_sites_and_pools() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Arch::Cnn {
            channels: vec![4, 4],
            kernel: 3,
        };
        let field = Network::new(&mut store, "f", &arch, 10, Head::Vector(10), &mut rng).unwrap();
        let bank = Network::new(&mut store, "v", &arch, 10, Head::Scalars(2), &mut rng).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        assert_eq!(value(&field, &store, &x).len(), 10);
        assert_eq!(value(&bank, &store, &x).len(), 2);
        assert!(Network::new(&mut store, "bad", &arch, 10, Head::Vector(5), &mut rng).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(&mut store, "v", &Arch::mlp(&[7, 5]), 4, Head::Scalars(2), &mut rng).unwrap();
        let x = [0.4, -1.2, 0.9, 0.05];
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(Tensor::new(vec![1, 4], x.to_vec()).unwrap());
        let t = net.forward(&mut g, &p, xv).unwrap();
        let m = net.jacobian(&mut g, &p, &t).unwrap();
        let m = g.value(m).data().to_vec();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let (vp, vm) = (value(&net, &store, &xp), value(&net, &store, &xm));
            for k in 0..2 {
                let fd = (vp[k] - vm[k]) / (2.0 * h);
                assert!((m[k * 4 + j] - fd).abs() <= 1e-8 * (1.0 + fd.abs()));
            }
        }
    }
}
