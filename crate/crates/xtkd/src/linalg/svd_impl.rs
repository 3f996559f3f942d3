//! Thin singular value decomposition via one-sided Jacobi rotations.
//!
//! The working matrix's columns are rotated in pairs until every pair is
//! numerically orthogonal; column norms are then the singular values and the
//! rotations accumulate into `V`.  The pair `(i, j)` is considered converged
//! when `|w_i . w_j| <= 1e-14 * ||w_i|| * ||w_j||`, which is stricter than a
//! global `1e-12 * ||A||_F^2` threshold and keeps the left singular vectors
//! orthonormal even for poorly conditioned inputs.

use super::Matrix;
use crate::error::{Error, Result};

/// Thin SVD `A = U diag(sigma) V^T` with `r = min(rows, cols)` triples.
///
/// Invariants (checked by the test suite, not at runtime):
/// `sigma` is non-negative and sorted descending; `U^T U = V^T V = I`;
/// the first nonzero entry of each `U` column is non-negative.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, `rows x r`.
    pub u: Matrix,
    /// Singular values, descending.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `cols x r`.
    pub v: Matrix,
}

impl SvdResult {
    /// Rank-`k` reconstruction: the sum of the top-`k` rank-one terms
    /// `sigma_i * u_i * v_i^T`.  `k = 0` gives the zero matrix.
    pub fn truncated_reconstruct(&self, k: usize) -> Result<Matrix> {
        if k > self.sigma.len() {
            return Err(Error::OutOfRange {
                what: "truncation index k",
                got: k.to_string(),
                allowed: format!("0..={}", self.sigma.len()),
            });
        }
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for i in 0..k {
            let vcol: Vec<f64> = (0..n).map(|b| self.v.get(b, i)).collect();
            for a in 0..m {
                let coef = self.sigma[i] * self.u.get(a, i);
                let row = out.row_mut(a);
                for (o, &vb) in row.iter_mut().zip(&vcol) {
                    *o += coef * vb;
                }
            }
        }
        Ok(out)
    }

    /// Full reconstruction from all retained triples.
    pub fn reconstruct(&self) -> Matrix {
        self.truncated_reconstruct(self.sigma.len())
            .expect("full reconstruction is always in range")
    }

    /// The tail sum `sigma_i * u_i * v_i^T` for `i >= start` (0-based).
    /// Equivalent to `reconstruct() - truncated_reconstruct(start)` but
    /// computed directly.
    pub fn tail_reconstruct(&self, start: usize) -> Result<Matrix> {
        if start > self.sigma.len() {
            return Err(Error::OutOfRange {
                what: "tail start index",
                got: start.to_string(),
                allowed: format!("0..={}", self.sigma.len()),
            });
        }
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for i in start..self.sigma.len() {
            let vcol: Vec<f64> = (0..n).map(|b| self.v.get(b, i)).collect();
            for a in 0..m {
                let coef = self.sigma[i] * self.u.get(a, i);
                let row = out.row_mut(a);
                for (o, &vb) in row.iter_mut().zip(&vcol) {
                    *o += coef * vb;
                }
            }
        }
        Ok(out)
    }
}

/// Number of singular values at or above `tol * sigma[0]`.
///
/// `sigma` must be non-negative and sorted descending, `tol` strictly
/// positive.  A spectrum whose leading value is zero has effective rank 0.
pub fn effective_rank(sigma: &[f64], tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::OutOfRange {
            what: "effective_rank tolerance",
            got: tol.to_string(),
            allowed: "> 0".to_string(),
        });
    }
    for (i, &s) in sigma.iter().enumerate() {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::Contract(format!(
                "sigma[{i}] = {s} is not a finite non-negative value"
            )));
        }
        if i > 0 && s > sigma[i - 1] {
            return Err(Error::Contract(format!(
                "sigma is not sorted descending: sigma[{}] = {} < sigma[{i}] = {s}",
                i - 1,
                sigma[i - 1]
            )));
        }
    }
    let Some(&top) = sigma.first() else {
        return Ok(0);
    };
    if top == 0.0 {
        return Ok(0);
    }
    let cut = tol * top;
    Ok(sigma.iter().take_while(|&&s| s >= cut).count())
}

/// Thin SVD of `a` by one-sided Jacobi.  Errors on non-finite entries and on
/// empty matrices.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Contract(format!(
            "svd requires a non-empty matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    for &x in a.data() {
        if !x.is_finite() {
            return Err(Error::Domain(format!("svd input has non-finite entry {x}")));
        }
    }
    let (mut u_cols, sigma, mut v_cols) = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        // A^T = U' S V'^T  =>  A = V' S U'^T
        let (u_t, sigma, v_t) = jacobi_tall(&a.transpose())?;
        (v_t, sigma, u_t)
    };
    fix_signs(&mut u_cols, &mut v_cols);
    Ok(SvdResult {
        u: cols_to_matrix(&u_cols),
        sigma,
        v: cols_to_matrix(&v_cols),
    })
}

/// One-sided Jacobi on a tall (or square) matrix.  Returns orthonormal
/// U-columns, descending singular values, and orthonormal V-columns.
fn jacobi_tall(a: &Matrix) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // Work on contiguous columns so rotations stream through memory.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();

    // Relative pair criterion (squared): rotate while
    // (w_i . w_j)^2 > tol^2 * ||w_i||^2 ||w_j||^2 with tol = 1e-14.
    const REL_TOL_SQ: f64 = 1e-28;
    const MAX_SWEEPS: usize = 128;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                let (aii, ajj, d) = pair_gram(&w[i], &w[j]);
                if d * d <= REL_TOL_SQ * aii * ajj {
                    continue;
                }
                rotated = true;
                // Zero the off-diagonal of the 2x2 Gram block [[aii,d],[d,ajj]].
                let zeta = (ajj - aii) / (2.0 * d);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    1.0 / (zeta - (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Domain(
            "svd did not converge within 128 Jacobi sweeps".to_string(),
        ));
    }

    // Column norms are the singular values; sort descending (ties keep the
    // lower original index first, for determinism).
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w.iter().map(|col| col_norm(col)).collect();
    order.sort_by(|&x, &y| {
        norms[y]
            .partial_cmp(&norms[x])
            .expect("finite norms")
            .then(x.cmp(&y))
    });

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            u_cols.push(w[j].iter().map(|&x| x / s).collect());
        } else {
            // Placeholder; filled by basis completion below.
            u_cols.push(vec![0.0; m]);
            null_slots.push(slot);
        }
        v_cols.push(v[j].clone());
    }

    // Exactly-zero columns carry no direction; complete U to an orthonormal
    // set with the canonical basis vector least represented so far.
    for slot in null_slots {
        u_cols[slot] = complete_direction(&u_cols, slot, m);
    }

    Ok((u_cols, sigma, v_cols))
}

/// `(||ci||^2, ||cj||^2, ci . cj)` in one pass.
fn pair_gram(ci: &[f64], cj: &[f64]) -> (f64, f64, f64) {
    let mut aii = 0.0;
    let mut ajj = 0.0;
    let mut d = 0.0;
    for (&x, &y) in ci.iter().zip(cj) {
        aii += x * x;
        ajj += y * y;
        d += x * y;
    }
    (aii, ajj, d)
}

fn col_norm(col: &[f64]) -> f64 {
    col.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Applies the plane rotation to columns `i` and `j` of `cols`.
fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let ci = &mut left[i];
    let cj = &mut right[0];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Unit vector orthogonal to every filled column (`skip` marks the slot being
/// completed; other placeholder slots are zero vectors and project to
/// nothing).  Picks the canonical basis vector with the largest residual.
fn complete_direction(u_cols: &[Vec<f64>], skip: usize, m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..m {
        let mut cand = vec![0.0; m];
        cand[k] = 1.0;
        for (idx, col) in u_cols.iter().enumerate() {
            if idx == skip {
                continue;
            }
            let proj: f64 = col.iter().zip(&cand).map(|(&a, &b)| a * b).sum();
            for (c, &u) in cand.iter_mut().zip(col) {
                *c -= proj * u;
            }
        }
        let norm = col_norm(&cand);
        if best.as_ref().map_or(true, |(b, _)| norm > *b) {
            best = Some((norm, cand));
        }
    }
    let (norm, mut dir) = best.expect("m >= 1");
    for x in &mut dir {
        *x /= norm;
    }
    dir
}

/// Makes the first nonzero entry of each U column non-negative, flipping the
/// matching V column to preserve the product.
fn fix_signs(u_cols: &mut [Vec<f64>], v_cols: &mut [Vec<f64>]) {
    for (ucol, vcol) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let lead = ucol.iter().find(|&&x| x != 0.0).copied().unwrap_or(0.0);
        if lead < 0.0 {
            for x in ucol.iter_mut() {
                *x = -*x;
            }
            for x in vcol.iter_mut() {
                *x = -*x;
            }
        }
    }
}

fn cols_to_matrix(cols: &[Vec<f64>]) -> Matrix {
    let m = cols[0].len();
    Matrix::from_fn(m, cols.len(), |i, j| cols[j][i])
}
