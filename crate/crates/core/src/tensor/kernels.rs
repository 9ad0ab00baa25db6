//! Raw numeric kernels shared by the graph ops.

/// Strided view of a row-major matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a * b + beta * c` with `c` dense row-major.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views were checked to cover `rows * cols` elements with
    // their strides, and `c` holds at least `m * n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place `L D L^T` factorisation of a symmetric `k x k` matrix (lower
/// triangle used): unit `L` below the diagonal, `D` on it. Returns `None` when
/// a pivot is not strictly positive, otherwise the condition estimate
/// `max(A_ii) / min(D_i)`.
pub(crate) fn cholesky(a: &mut [f64], k: usize) -> Option<f64> {
    let max_diag = (0..k).map(|i| a[i * k + i]).fold(0.0_f64, f64::max);
    let mut min_pivot = f64::INFINITY;
    let mut work = vec![0.0; k];
    for j in 0..k {
        // work[p] = L[j,p] * D[p]
        let mut d = a[j * k + j];
        for p in 0..j {
            work[p] = a[j * k + p] * a[p * k + p];
            d -= a[j * k + p] * work[p];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        min_pivot = min_pivot.min(d);
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * work[p];
            }
            a[i * k + j] = s / d;
        }
        for i in 0..j {
            a[i * k + j] = 0.0;
        }
    }
    Some(if k == 0 { 1.0 } else { max_diag / min_pivot })
}

/// Solves `L D L^T x = b` in place for a `k x m` right-hand side, with the
/// factors produced by [`cholesky`].
pub(crate) fn cholesky_solve(l: &[f64], k: usize, b: &mut [f64], m: usize) {
    for col in 0..m {
        for i in 0..k {
            let mut s = b[i * m + col];
            for p in 0..i {
                s -= l[i * k + p] * b[p * m + col];
            }
            b[i * m + col] = s;
        }
        for i in 0..k {
            b[i * m + col] /= l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = b[i * m + col];
            for p in (i + 1)..k {
                s -= l[p * k + i] * b[p * m + col];
            }
            b[i * m + col] = s;
        }
    }
}

/// Circular 1-D convolution: `x [batch, cin, len]`, `w [cout, cin, ks]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_circular(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    ks: usize,
) -> Vec<f64> {
    let half = (ks / 2) as isize;
    let mut y = vec![0.0; batch * cout * len];
    for b in 0..batch {
        for co in 0..cout {
            let out = &mut y[(b * cout + co) * len..(b * cout + co + 1) * len];
            if let Some(bias) = bias {
                out.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..cin {
                let xin = &x[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                for j in 0..ks {
                    let wv = w[(co * cin + ci) * ks + j];
                    let shift = (j as isize - half).rem_euclid(len as isize) as usize;
                    for (pos, o) in out.iter_mut().enumerate() {
                        let src = pos + shift;
                        let src = if src >= len { src - len } else { src };
                        *o += wv * xin[src];
                    }
                }
            }
        }
    }
    y
}

/// Kernel gradient of [`conv1d_circular`]: `dw[co, ci, j] = sum x * gy`.
pub(crate) fn conv1d_weight_grad(
    x: &[f64],
    gy: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    ks: usize,
) -> Vec<f64> {
    let half = (ks / 2) as isize;
    let mut gw = vec![0.0; cout * cin * ks];
    for b in 0..batch {
        for co in 0..cout {
            let g = &gy[(b * cout + co) * len..(b * cout + co + 1) * len];
            for ci in 0..cin {
                let xin = &x[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                for j in 0..ks {
                    let shift = (j as isize - half).rem_euclid(len as isize) as usize;
                    let mut acc = 0.0;
                    for (pos, gv) in g.iter().enumerate() {
                        let src = pos + shift;
                        let src = if src >= len { src - len } else { src };
                        acc += gv * xin[src];
                    }
                    gw[(co * cin + ci) * ks + j] += acc;
                }
            }
        }
    }
    gw
}

/// Kernel with swapped channels and reversed taps; convolving with it applies
/// the transpose of the original convolution operator.
pub(crate) fn conv_adjoint_weight(w: &[f64], cout: usize, cin: usize, ks: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for j in 0..ks {
                out[(ci * cout + co) * ks + (ks - 1 - j)] = w[(co * cin + ci) * ks + j];
            }
        }
    }
    out
}

/// Below this input separation the tanh slope falls back to the derivative.
pub(crate) const SLOPE_FALLBACK: f64 = 1e-8;
/// Below this separation the slope's partial derivatives use a Taylor series.
const SLOPE_SERIES: f64 = 1e-4;

#[inline]
pub(crate) fn tanh_deriv(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// Slope of tanh between two points.
#[inline]
pub(crate) fn tanh_slope(a: f64, b: f64) -> f64 {
    let d = b - a;
    if d.abs() <= SLOPE_FALLBACK {
        tanh_deriv(0.5 * (a + b))
    } else if d.abs() < 20.0 {
        // tanh b - tanh a = sinh(b - a) / (cosh a cosh b), free of cancellation.
        d.sinh() / d / (a.cosh() * b.cosh())
    } else {
        (b.tanh() - a.tanh()) / d
    }
}

/// Partial derivatives `(ds/da, ds/db)` of [`tanh_slope`].
pub(crate) fn tanh_slope_partials(a: f64, b: f64) -> (f64, f64) {
    let d = b - a;
    let m = 0.5 * (a + b);
    let t = m.tanh();
    let t1 = 1.0 - t * t;
    let t2 = -2.0 * t * t1;
    if d.abs() <= SLOPE_FALLBACK {
        return (0.5 * t2, 0.5 * t2);
    }
    if d.abs() < SLOPE_SERIES {
        // s = t'(m) + d^2/24 t'''(m) + O(d^4)
        let t3 = -2.0 * t1 * t1 + 4.0 * t * t * t1;
        let t4 = -4.0 * t1 * t2 + 8.0 * t * t1 * t1 + 4.0 * t * t * t2;
        let common = 0.5 * t2 + d * d / 48.0 * t4;
        let odd = d / 12.0 * t3;
        return (common - odd, common + odd);
    }
    let s = (b.tanh() - a.tanh()) / d;
    let da = (s - tanh_deriv(a)) / d;
    let db = (tanh_deriv(b) - s) / d;
    (da, db)
}
