//! Small dense linear algebra used by the targets and diagnostics.
//!
//! The matrices here are tiny (covariances up to a handful of dimensions,
//! unmixing matrices up to 8x8), so plain dense factorizations are all we
//! need: Cholesky for SPD covariances and LU with partial pivoting for
//! general square systems.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{KsdError, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` if a pivot drops to zero or below, i.e. the matrix is not
/// numerically SPD.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// LU factorization with partial pivoting, stored packed (U on and above the
/// diagonal, L strictly below with unit diagonal implied).
pub struct Lu {
    lu: Array2<f64>,
    piv: Vec<usize>,
    /// +1.0 or -1.0 depending on the permutation parity.
    sign: f64,
}

impl Lu {
    /// Factors a square matrix. Returns `None` on an exactly zero pivot.
    pub fn factor(a: ArrayView2<f64>) -> Option<Lu> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return None;
        }
        let mut lu = a.to_owned();
        let mut piv = Vec::with_capacity(n);
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[[k, k]].abs();
            for i in (k + 1)..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                sign = -sign;
            }
            piv.push(p);
            let pivot = lu[[k, k]];
            for i in (k + 1)..n {
                let m = lu[[i, k]] / pivot;
                lu[[i, k]] = m;
                for j in (k + 1)..n {
                    lu[[i, j]] -= m * lu[[k, j]];
                }
            }
        }
        Some(Lu { lu, piv, sign })
    }

    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x = b.to_owned();
        for k in 0..n {
            x.swap(k, self.piv[k]);
        }
        for i in 0..n {
            for k in 0..i {
                let v = x[k];
                x[i] -= self.lu[[i, k]] * v;
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let v = x[k];
                x[i] -= self.lu[[i, k]] * v;
            }
            x[i] /= self.lu[[i, i]];
        }
        x
    }

    /// `(log|det A|, sign of det A)`.
    pub fn log_abs_det(&self) -> (f64, f64) {
        let n = self.lu.nrows();
        let mut log = 0.0;
        let mut sign = self.sign;
        for i in 0..n {
            let d = self.lu[[i, i]];
            log += d.abs().ln();
            if d < 0.0 {
                sign = -sign;
            }
        }
        (log, sign)
    }

    /// Dense inverse assembled column by column from triangular solves.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.lu.nrows();
        let mut inv = Array2::<f64>::zeros((n, n));
        let mut e = Array1::<f64>::zeros(n);
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        inv
    }
}

/// Maximum absolute column sum.
pub fn one_norm(a: ArrayView2<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..a.ncols() {
        let s: f64 = a.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Inverts a square matrix, rejecting singular or badly conditioned inputs.
/// The condition number is the 1-norm estimate `|A|_1 |A^-1|_1`.
pub fn invert_checked(a: ArrayView2<f64>, cond_limit: f64) -> Result<Array2<f64>> {
    let lu = Lu::factor(a).ok_or(KsdError::Singular {
        cond: f64::INFINITY,
        limit: cond_limit,
    })?;
    let inv = lu.inverse();
    let cond = one_norm(a) * one_norm(inv.view());
    if !cond.is_finite() || cond > cond_limit {
        return Err(KsdError::Singular {
            cond,
            limit: cond_limit,
        });
    }
    Ok(inv)
}
