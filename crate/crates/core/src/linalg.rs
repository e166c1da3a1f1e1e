//! Small dense helpers for the filter hot paths.
//!
//! Matrices here are tiny (state dimension 3 to 6), so plain loops over
//! nalgebra's column-major storage beat the generic gemm paths and avoid
//! allocating inside the prediction loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};

pub(crate) fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Replaces `m` with `(m + mᵀ) / 2`.
pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let a = m.as_mut_slice();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (a[i + j * n] + a[j + i * n]);
            a[i + j * n] = avg;
            a[j + i * n] = avg;
        }
    }
}

/// `cov <- J cov Jᵀ + add`, using `tmp` as scratch. All matrices are n×n.
pub(crate) fn sandwich_add_in_place(
    jac: &DMatrix<f64>,
    cov: &mut DMatrix<f64>,
    add: &DMatrix<f64>,
    tmp: &mut DMatrix<f64>,
) {
    let n = cov.nrows();
    let j = jac.as_slice();
    let c = cov.as_slice();
    let t = tmp.as_mut_slice();
    // tmp = J * C
    for col in 0..n {
        for row in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += j[row + k * n] * c[k + col * n];
            }
            t[row + col * n] = acc;
        }
    }
    let a = add.as_slice();
    let out = cov.as_mut_slice();
    // cov = tmp * Jᵀ + add
    for col in 0..n {
        for row in 0..n {
            let mut acc = a[row + col * n];
            for k in 0..n {
                acc += t[row + k * n] * j[col + k * n];
            }
            out[row + col * n] = acc;
        }
    }
}

fn max_abs_diag(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Lower-triangular factor `L` with `L Lᵀ = m` for a symmetric positive
/// semidefinite `m`.
///
/// Zero pivots are accepted and produce zero columns, so a zero covariance
/// factors to the zero matrix. Returns `None` when a pivot is clearly
/// negative or a zero pivot carries a non-zero off-diagonal residual.
pub(crate) fn semidefinite_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let scale = max_abs_diag(m).max(f64::MIN_POSITIVE);
    let pivot_tol = 16.0 * (n as f64) * f64::EPSILON * scale;
    let residual_tol = 1e-8 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > pivot_tol {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        } else if d >= -pivot_tol {
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > residual_tol {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    Some(l)
}

// Small dense kernels on column-major slices. They are inlined so that
// callers passing constant dimensions get fully unrolled code.

/// Lower Cholesky factor of the n×n matrix `a` into `l`; `false` when a pivot
/// is not strictly positive and finite.
#[inline(always)]
pub(crate) fn cholesky_into(a: &[f64], l: &mut [f64], n: usize) -> bool {
    let (a, l) = (&a[..n * n], &mut l[..n * n]);
    for j in 0..n {
        let mut d = a[j + j * n];
        for k in 0..j {
            d -= l[j + k * n] * l[j + k * n];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let ljj = d.sqrt();
        l[j + j * n] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i + j * n];
            for k in 0..j {
                s -= l[i + k * n] * l[j + k * n];
            }
            l[i + j * n] = s / ljj;
        }
    }
    true
}

#[inline(always)]
pub(crate) fn chol_log_det(l: &[f64], n: usize) -> f64 {
    let l = &l[..n * n];
    let prod: f64 = (0..n).map(|i| l[i + i * n]).product();
    if prod.is_normal() {
        2.0 * prod.ln()
    } else {
        2.0 * (0..n).map(|i| l[i + i * n].ln()).sum::<f64>()
    }
}

/// Solves `L z = b` in place.
#[inline(always)]
pub(crate) fn forward_sub(l: &[f64], b: &mut [f64], n: usize) {
    let (l, b) = (&l[..n * n], &mut b[..n]);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i + k * n] * b[k];
        }
        b[i] = s / l[i + i * n];
    }
}

/// Solves `Lᵀ z = b` in place.
#[inline(always)]
pub(crate) fn backward_sub(l: &[f64], b: &mut [f64], n: usize) {
    let (l, b) = (&l[..n * n], &mut b[..n]);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k + i * n] * b[k];
        }
        b[i] = s / l[i + i * n];
    }
}

/// Cholesky factorization of a symmetric positive definite matrix, with the
/// helpers the Kalman updates need.
#[derive(Debug, Clone)]
pub(crate) struct SpdFactor {
    l: DMatrix<f64>,
}

impl SpdFactor {
    pub(crate) fn new(m: &DMatrix<f64>) -> Option<Self> {
        let mut f = Self::zeros(m.nrows());
        f.refactor(m).then_some(f)
    }

    pub(crate) fn zeros(n: usize) -> Self {
        Self {
            l: DMatrix::zeros(n, n),
        }
    }

    /// Factors `m` into the existing buffer; `false` when `m` is not
    /// numerically positive definite, leaving the buffer unspecified.
    pub(crate) fn refactor(&mut self, m: &DMatrix<f64>) -> bool {
        let n = m.nrows();
        cholesky_into(m.as_slice(), self.l.as_mut_slice(), n)
    }

    pub(crate) fn log_det(&self) -> f64 {
        chol_log_det(self.l.as_slice(), self.l.nrows())
    }

    /// Solves `L z = b` in place.
    pub(crate) fn forward(&self, b: &mut [f64]) {
        forward_sub(self.l.as_slice(), b, self.l.nrows());
    }

    /// Solves `Lᵀ z = b` in place.
    pub(crate) fn backward(&self, b: &mut [f64]) {
        backward_sub(self.l.as_slice(), b, self.l.nrows());
    }

    /// `rᵀ M⁻¹ r`.
    pub(crate) fn mahalanobis(&self, r: &DVector<f64>) -> f64 {
        let mut z = r.as_slice().to_vec();
        self.forward(&mut z);
        z.iter().map(|v| v * v).sum()
    }

    #[cfg(test)]
    pub(crate) fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        let s = out.as_mut_slice();
        self.forward(s);
        self.backward(s);
        out
    }
}

pub(crate) fn check_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(FilterError::DimensionMismatch(format!(
            "{what} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}
