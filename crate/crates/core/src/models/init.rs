use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Orthogonal `rows x cols` matrix from the QR factorisation of a
/// standard-normal draw, with the signs of `R`'s diagonal folded into `Q`.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    assert!(rows >= 1 && cols >= 1);
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    // q is tall x short with orthonormal columns.
    let mut data = Vec::with_capacity(rows * cols);
    if rows >= cols {
        for i in 0..rows {
            for j in 0..cols {
                data.push(q[(i, j)]);
            }
        }
    } else {
        for i in 0..rows {
            for j in 0..cols {
                data.push(q[(j, i)]);
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("orthogonal shape")
}

pub fn orthogonal_seeded(rows: usize, cols: usize, seed: u64) -> Tensor {
    orthogonal(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_error(w: &Tensor) -> f64 {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        let d = w.data();
        let mut worst: f64 = 0.0;
        if r <= c {
            for i in 0..r {
                for j in 0..r {
                    let s: f64 = (0..c).map(|k| d[i * c + k] * d[j * c + k]).sum();
                    worst = worst.max((s - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
        } else {
            for i in 0..c {
                for j in 0..c {
                    let s: f64 = (0..r).map(|k| d[k * c + i] * d[k * c + j]).sum();
                    worst = worst.max((s - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn one_by_one_is_unit() {
        let w = orthogonal_seeded(1, 1, 5);
        assert_eq!(w.data()[0].abs(), 1.0);
    }

    #[test]
    fn orthonormal_in_every_aspect_ratio() {
        for (r, c) in [(3, 3), (2, 7), (9, 4), (200, 8), (1, 5)] {
            let w = orthogonal_seeded(r, c, 42);
            assert_eq!(w.shape(), &[r, c]);
            assert!(gram_error(&w) <= 1e-10, "{r}x{c}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = orthogonal_seeded(5, 3, 9);
        let b = orthogonal_seeded(5, 3, 9);
        let c = orthogonal_seeded(5, 3, 10);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, c);
    }
}
