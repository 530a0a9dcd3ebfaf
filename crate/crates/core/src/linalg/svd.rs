//! Thin singular value decomposition.
//!
//! The input is first reduced with a Householder QR (`A = Q R`, applied to
//! the transpose when there are more columns than rows), then `R` is
//! diagonalized with one-sided Jacobi rotations. Cost is `O(p q^2)` for the
//! QR plus `O(q^3)` per Jacobi sweep, with `p = max(rows, cols)` and
//! `q = min(rows, cols)`.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::Scalar;

/// Iteration cap for Jacobi sweeps before reporting non-convergence.
pub const MAX_SWEEPS: usize = 80;

/// `X = T * diag(sigma) * Vt` with `k = min(rows, cols)`.
///
/// `t` is `rows x k`, `vt` is `k x cols`; both have orthonormal columns/rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdResult<T> {
    pub t: Matrix<T>,
    pub sigma: Vec<T>,
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// First right singular vector (row 0 of `vt`).
    pub fn leading_right_vector(&self) -> &[T] {
        self.vt.row(0)
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        let k = self.sigma.len();
        let mut scaled = self.t.clone();
        for i in 0..scaled.rows() {
            for j in 0..k {
                scaled[(i, j)] = scaled[(i, j)] * self.sigma[j];
            }
        }
        scaled
            .matmul(&self.vt)
            .expect("factor shapes are consistent by construction")
    }
}

pub fn svd_decompose<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape(format!(
            "SVD needs a non-empty matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Ingestion("non-finite value in SVD input".into()));
    }

    let transposed = m.cols() > m.rows();
    let (p, q) = if transposed {
        (m.cols(), m.rows())
    } else {
        (m.rows(), m.cols())
    };

    // Column-major working copy of the tall matrix.
    let mut cols: Vec<Vec<T>> = if transposed {
        (0..q).map(|j| m.row(j).to_vec()).collect()
    } else {
        (0..q).map(|j| m.column_vec(j)).collect()
    };

    let reflectors = householder_qr(&mut cols);
    let mut w: Vec<Vec<T>> = (0..q)
        .map(|j| (0..q).map(|i| if i <= j { cols[j][i] } else { T::zero() }).collect())
        .collect();
    let mut v: Vec<Vec<T>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    jacobi_sweeps(&mut w, &mut v)?;

    let mut sigma: Vec<T> = w.iter().map(|c| norm(c)).collect();
    let sigma_max = sigma.iter().copied().fold(T::zero(), T::max);
    let cutoff = sigma_max * T::from_usize_lossy(q) * T::tolerance();

    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| sigma[b].cmp_total(&sigma[a]));

    let mut u_r: Vec<Vec<T>> = Vec::with_capacity(q);
    let mut v_sorted: Vec<Vec<T>> = Vec::with_capacity(q);
    let mut sorted_sigma = Vec::with_capacity(q);
    let mut pending = Vec::new();
    for (slot, &idx) in order.iter().enumerate() {
        let s = sigma[idx];
        if s > cutoff && s > T::zero() {
            u_r.push(w[idx].iter().map(|&x| x / s).collect());
        } else {
            u_r.push(vec![T::zero(); q]);
            pending.push(slot);
        }
        v_sorted.push(std::mem::take(&mut v[idx]));
        sorted_sigma.push(s);
    }
    complete_orthonormal(&mut u_r, &pending);
    sigma = sorted_sigma;

    // Left vectors of the tall matrix: U = Q * U_r.
    let mut u: Vec<Vec<T>> = u_r
        .iter()
        .map(|c| apply_q(&reflectors, c, p))
        .collect();

    // Zero rows of the tall matrix have exactly zero weight in every
    // singular vector with a non-zero singular value.
    let zero_rows: Vec<usize> = (0..p)
        .filter(|&r| {
            if transposed {
                m.column(r).all(|x| x == T::zero())
            } else {
                m.row(r).iter().all(|&x| x == T::zero())
            }
        })
        .collect();
    for (col, &s) in u.iter_mut().zip(&sigma) {
        if s > cutoff && s > T::zero() {
            for &r in &zero_rows {
                col[r] = T::zero();
            }
        }
    }

    // Columns of `left` become T, columns of `right` become rows of Vt.
    let (mut left, mut right) = if transposed { (v_sorted, u) } else { (u, v_sorted) };

    for (l, r) in left.iter_mut().zip(right.iter_mut()) {
        let mut best = 0;
        for (i, x) in r.iter().enumerate() {
            if x.abs() > r[best].abs() {
                best = i;
            }
        }
        if r[best] < T::zero() {
            r.iter_mut().for_each(|x| *x = -*x);
            l.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let rows = m.rows();
    let k = q;
    let mut t = Matrix::zeros(rows, k);
    for (j, c) in left.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            t[(i, j)] = x;
        }
    }
    let mut vt_data = Vec::with_capacity(k * m.cols());
    for r in &right {
        vt_data.extend_from_slice(r);
    }
    let vt = Matrix::from_parts_unchecked(k, m.cols(), vt_data);
    Ok(SvdResult { t, sigma, vt })
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// In-place Householder QR on column-major `cols` (p x q, p >= q).
/// Leaves R in the upper triangle and returns the reflectors.
fn householder_qr<T: Scalar>(cols: &mut [Vec<T>]) -> Vec<Vec<T>> {
    let q = cols.len();
    let p = cols.first().map_or(0, Vec::len);
    let two = T::one() + T::one();
    let mut reflectors = Vec::with_capacity(q);
    for k in 0..q {
        let x = &cols[k][k..];
        let nx = norm(x);
        if nx == T::zero() {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] > T::zero() { -nx } else { nx };
        let mut vk = x.to_vec();
        vk[0] = vk[0] - alpha;
        let vnorm2 = dot(&vk, &vk);
        if vnorm2 == T::zero() {
            reflectors.push(Vec::new());
            continue;
        }
        for col in cols.iter_mut().skip(k) {
            let tail = &mut col[k..p];
            let f = two * dot(&vk, tail) / vnorm2;
            for (t, &vi) in tail.iter_mut().zip(&vk) {
                *t = *t - f * vi;
            }
        }
        reflectors.push(vk);
    }
    reflectors
}

/// Computes `Q * [c; 0]` for a q-vector `c`, where Q = H_0 H_1 ... H_{q-1}.
fn apply_q<T: Scalar>(reflectors: &[Vec<T>], c: &[T], p: usize) -> Vec<T> {
    let two = T::one() + T::one();
    let mut out = vec![T::zero(); p];
    out[..c.len()].copy_from_slice(c);
    for (k, vk) in reflectors.iter().enumerate().rev() {
        if vk.is_empty() {
            continue;
        }
        let vnorm2 = dot(vk, vk);
        let tail = &mut out[k..];
        let f = two * dot(vk, tail) / vnorm2;
        for (t, &vi) in tail.iter_mut().zip(vk) {
            *t = *t - f * vi;
        }
    }
    out
}

/// One-sided Jacobi: rotates column pairs of `w` until mutually orthogonal,
/// accumulating the rotations into `v`.
fn jacobi_sweeps<T: Scalar>(w: &mut [Vec<T>], v: &mut [Vec<T>]) -> Result<()> {
    let q = w.len();
    let eps = T::tolerance();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let two = T::one() + T::one();
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(w, i, j, c, s);
                rotate(v, i, j, c, s);
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
    )))
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], i: usize, j: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(j);
    let (a, b) = (&mut head[i], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xi = *x;
        let yi = *y;
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

/// Fills the `pending` columns of `basis` with unit vectors orthogonal to
/// every other column (Gram-Schmidt over the standard basis).
fn complete_orthonormal<T: Scalar>(basis: &mut [Vec<T>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let n = basis[0].len();
    let mut filled: Vec<bool> = (0..basis.len()).map(|k| !pending.contains(&k)).collect();
    for &slot in pending {
        let mut best: Option<(T, Vec<T>)> = None;
        for e in 0..n {
            let mut cand = vec![T::zero(); n];
            cand[e] = T::one();
            for _ in 0..2 {
                for (k, b) in basis.iter().enumerate() {
                    if filled[k] {
                        let proj = dot(&cand, b);
                        for (c, &bi) in cand.iter_mut().zip(b) {
                            *c = *c - proj * bi;
                        }
                    }
                }
            }
            let nc = norm(&cand);
            if best.as_ref().is_none_or(|(bn, _)| nc > *bn) {
                best = Some((nc, cand));
            }
        }
        let (nc, mut cand) = best.expect("n >= 1");
        cand.iter_mut().for_each(|c| *c = *c / nc);
        basis[slot] = cand;
        filled[slot] = true;
    }
}
