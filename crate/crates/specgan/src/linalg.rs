//! Dense 64-bit linear algebra: products, norms, orthonormalization, a one-sided
//! Jacobi SVD, and the one-step power method.
//!
//! Everything here is deterministic and allocation-straightforward. The Jacobi
//! SVD is the ground-truth oracle the rest of the crate measures itself against:
//! it is slow compared to LAPACK but bit-stable across runs, which matters more
//! at desk scale (nothing here exceeds a few hundred rows).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Failure modes of the numeric kernels.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error(
        "dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}"
    )]
    DimMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("rank-deficient input: column pivot {pivot:.3e} below 1e-12 at column {col}")]
    Degenerate { col: usize, pivot: f64 },
    #[error(
        "jacobi svd failed to converge in {sweeps} sweeps (relative off-diagonal {residual:.3e})"
    )]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("power iteration hit a numerically zero vector; caller should reseed u")]
    PowerRestart,
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from a row-major buffer. Panics if the length is wrong; that is a
    /// programming error, not a runtime condition.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "buffer length must be rows*cols");
        Mat { rows, cols, data }
    }

    /// Identity of the given size.
    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entry accessor (row i, column j).
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Mutable entry accessor.
    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    /// Contiguous view of row i.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable view of row i.
    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Frobenius norm.
    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// True when any entry is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product, `(a.rows, b.cols)`.
///
/// The inner loops run in i-k-j order so both the `b` row and the output row are
/// walked contiguously; with -O3 this autovectorizes and is all the speed the
/// crate needs.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Orthonormalizes the columns of `a` (rows ≥ cols) by modified Gram-Schmidt.
///
/// Each column is projected out twice; the second pass costs little and keeps
/// `‖QᵀQ − I‖_F` at the 1e-15 level even for poorly conditioned inputs. A pivot
/// below 1e-12 means the columns are numerically dependent and the input is
/// rejected rather than silently padded.
pub fn qr_orthonormalize(a: &Mat) -> Result<Mat, LinalgError> {
    if a.rows < a.cols {
        return Err(LinalgError::DimMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: a.cols,
            right_cols: a.cols,
        });
    }
    // Work on the transpose so each column lives in one contiguous row.
    let mut qt = a.transpose();
    let m = a.rows;
    let n = a.cols;
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let coef = {
                    let qi = &qt.data[i * m..(i + 1) * m];
                    let qj = &qt.data[j * m..(j + 1) * m];
                    dot(qi, qj)
                };
                let (head, tail) = qt.data.split_at_mut(j * m);
                let qi = &head[i * m..(i + 1) * m];
                for (x, &y) in tail[..m].iter_mut().zip(qi) {
                    *x -= coef * y;
                }
            }
        }
        let pivot = norm(&qt.data[j * m..(j + 1) * m]);
        if pivot < 1e-12 {
            return Err(LinalgError::Degenerate { col: j, pivot });
        }
        for x in &mut qt.data[j * m..(j + 1) * m] {
            *x /= pivot;
        }
    }
    Ok(qt.transpose())
}

/// Relative off-diagonal threshold for the Jacobi sweep: a column pair is
/// rotated while `|γ| > JACOBI_TOL · √(αβ)` where `α, β` are the squared column
/// norms and `γ` their inner product.
const JACOBI_TOL: f64 = 1e-14;
/// Hard cap on cyclic sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 60;

/// Full SVD `a = U diag(s) Vᵀ` by one-sided Jacobi with cyclic sweeps.
///
/// Returns thin factors: `U` is rows×r, `V` is cols×r with `r = min(rows, cols)`,
/// `s` is descending and nonnegative. Zero singular directions get orthonormal
/// filler columns so `U`, `V` always have orthonormal columns.
pub fn jacobi_svd(a: &Mat) -> Result<(Mat, Vec<f64>, Mat), LinalgError> {
    if a.rows < a.cols {
        // One-sided Jacobi wants at least as many rows as columns; for wide
        // inputs run on the transpose and swap the factors back.
        let (u, s, v) = jacobi_svd(&a.transpose())?;
        return Ok((v, s, u));
    }
    let m = a.rows;
    let n = a.cols;

    // bt holds Bᵀ so the columns being rotated are contiguous rows; vt likewise
    // accumulates Vᵀ.
    let mut bt = a.transpose();
    let mut vt = Mat::identity(n);

    let mut converged = n < 2;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if n < 2 {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let bp = &bt.data[p * m..(p + 1) * m];
                    let bq = &bt.data[q * m..(q + 1) * m];
                    (dot(bp, bp), dot(bq, bq), dot(bp, bq))
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Classic stable rotation choice zeroing the (p,q) inner product.
                let tau = (beta - alpha) / (2.0 * gamma);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut bt.data, m, p, q, c, s);
                rotate_rows(&mut vt.data, n, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        // Report how far from mutual orthogonality the worst pair still is.
        let mut residual: f64 = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let bp = &bt.data[p * m..(p + 1) * m];
                let bq = &bt.data[q * m..(q + 1) * m];
                let (alpha, beta, gamma) = (dot(bp, bp), dot(bq, bq), dot(bp, bq));
                if alpha > 0.0 && beta > 0.0 {
                    residual = residual.max(gamma.abs() / (alpha * beta).sqrt());
                }
            }
        }
        return Err(LinalgError::NonConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            residual,
        });
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| norm(&bt.data[j * m..(j + 1) * m])).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut s = Vec::with_capacity(n);
    let mut ut = Mat::zeros(n, m);
    let mut v = Mat::zeros(n, n);
    // Singular values at or below this are treated as exact zeros and their U
    // columns filled in by completion rather than normalizing noise.
    let zero_tol = a.fro_norm() * 1e-14;
    for (slot, &j) in order.iter().enumerate() {
        let sj = norms[j];
        s.push(sj);
        for i in 0..n {
            v.data[i * n + slot] = vt.data[j * n + i];
        }
        if sj > zero_tol {
            let bj = &bt.data[j * m..(j + 1) * m];
            for (dst, &x) in ut.data[slot * m..(slot + 1) * m].iter_mut().zip(bj) {
                *dst = x / sj;
            }
        }
        // Zero columns handled below once the nonzero ones are in place.
    }
    // Orthonormal completion for zero singular directions: take standard basis
    // vectors, project out all existing U columns, keep the first with a healthy
    // residual. Guaranteed to succeed since rank < m.
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > zero_tol {
            continue;
        }
        s[slot] = 0.0;
        let mut filled = false;
        for basis in 0..m {
            let mut w = vec![0.0; m];
            w[basis] = 1.0;
            for _pass in 0..2 {
                for k in 0..n {
                    if k == slot {
                        continue;
                    }
                    let uk = &ut.data[k * m..(k + 1) * m];
                    if norm(uk) == 0.0 {
                        continue;
                    }
                    let coef = dot(uk, &w);
                    for (wx, &ux) in w.iter_mut().zip(uk) {
                        *wx -= coef * ux;
                    }
                }
            }
            let wn = norm(&w);
            if wn > 0.5 {
                for (dst, &x) in ut.data[slot * m..(slot + 1) * m].iter_mut().zip(&w) {
                    *dst = x / wn;
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "orthonormal completion must find a basis vector");
    }

    Ok((ut.transpose(), s, v))
}

/// Applies the plane rotation `(row_p, row_q) ← (c·row_p − s·row_q, s·row_p + c·row_q)`
/// to two rows of a flat row-major buffer with the given stride.
fn rotate_rows(data: &mut [f64], stride: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (head, tail) = data.split_at_mut(hi * stride);
    let row_lo = &mut head[lo * stride..(lo + 1) * stride];
    let row_hi = &mut tail[..stride];
    // p is always the lower index here because callers pass p < q.
    for (x, y) in row_lo.iter_mut().zip(row_hi.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// One-step power method for the spectral norm, with a persistent left vector.
///
/// Each step performs `v ← wᵀu/‖wᵀu‖`, `u ← wv/‖wv‖` and the estimate is
/// `σ̂ = uᵀwv = ‖wv‖`, which never exceeds the true σ₁: `‖wv‖ ≤ σ₁‖v‖ = σ₁`.
/// Returns the estimate and the updated `u` for the caller to carry forward.
pub fn power_iter_sn(w: &Mat, u: &[f64], steps: usize) -> Result<(f64, Vec<f64>), LinalgError> {
    assert!(steps >= 1, "at least one power step required");
    if u.len() != w.rows {
        return Err(LinalgError::DimMismatch {
            left_rows: w.rows,
            left_cols: w.cols,
            right_rows: u.len(),
            right_cols: 1,
        });
    }
    let wt = w.transpose();
    let mut u_cur = u.to_vec();
    let mut sigma = 0.0;
    for _ in 0..steps {
        let mut v = matvec(&wt, &u_cur);
        let vn = norm(&v);
        if vn < 1e-150 {
            return Err(LinalgError::PowerRestart);
        }
        for x in &mut v {
            *x /= vn;
        }
        let wv = matvec(w, &v);
        let wvn = norm(&wv);
        if wvn < 1e-150 {
            return Err(LinalgError::PowerRestart);
        }
        u_cur = wv;
        for x in &mut u_cur {
            *x /= wvn;
        }
        sigma = wvn;
    }
    Ok((sigma, u_cur))
}

/// Matrix-vector product for row-major `m`.
fn matvec(m: &Mat, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.cols, x.len());
    (0..m.rows).map(|i| dot(m.row(i), x)).collect()
}
