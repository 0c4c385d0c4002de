//! Minimal dense linear algebra and seeded randomness used by every other
//! module: row-major matrices, symmetric positive-definite solves, singular
//! values, and reproducible random streams.
//!
//! Everything here is pure: identical inputs (including RNG state) yield
//! bit-identical outputs. The largest matrices at desk scale are a few
//! hundred rows, so there is no blocking, no BLAS, and no sparsity.

mod rng;

pub use rng::{stream_key, RngStream};

/// Stream-id domains so different components never share a random stream.
pub mod rng_domains {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const ANCHORS: u64 = 4;
    pub const CLIENT: u64 = 5;
    pub const EVAL: u64 = 6;
}

use crate::error::{Result, SimError};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "row-major data length must be rows*cols"
        );
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                s[j] += v;
            }
        }
        s
    }

    /// Naive matrix product; fine at desk scale.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(SimError::NonFinite(context))
        }
    }
}

/// Dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Solve `A x = rhs` for symmetric positive (semi-)definite `A` by Cholesky
/// factorization with iterative refinement. If the factorization fails, a
/// diagonal ridge of 1e-12 is added once; the ADMM system can be
/// rank-deficient when client deviations coincide.
///
/// The returned solution satisfies `||A x - rhs|| <= 1e-8 * (1 + ||rhs||)`.
pub fn solve_spd(a: &Mat, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(SimError::dim("solve_spd", format!("{n}x{n}"), format!("{}x{}", a.rows(), a.cols())));
    }
    if rhs.len() != n {
        return Err(SimError::dim("solve_spd rhs", n, rhs.len()));
    }
    a.check_finite("solve_spd matrix")?;
    if !all_finite(rhs) {
        return Err(SimError::NonFinite("solve_spd rhs"));
    }
    debug_assert!(is_symmetric(a, 1e-10), "solve_spd expects a symmetric matrix");

    let chol = cholesky(a, 0.0).or_else(|| cholesky(a, 1e-12));
    let l = chol.ok_or(SimError::Singular)?;

    let mut x = chol_solve(&l, rhs);
    // A couple of refinement steps keep the residual near machine precision
    // even for poorly conditioned instances.
    let bound = 1e-8 * (1.0 + norm(rhs));
    for _ in 0..3 {
        let r = residual(a, &x, rhs);
        if norm(&r) <= 0.1 * bound {
            break;
        }
        let dx = chol_solve(&l, &r);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
    }
    if !all_finite(&x) {
        return Err(SimError::Singular);
    }
    if norm(&residual(a, &x, rhs)) > bound {
        return Err(SimError::Singular);
    }
    Ok(x)
}

fn is_symmetric(a: &Mat, rel_tol: f64) -> bool {
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = rel_tol * (1.0 + scale);
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return false;
            }
        }
    }
    true
}

fn residual(a: &Mat, x: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = a.rows();
    let mut r = rhs.to_vec();
    for i in 0..n {
        r[i] -= dot(a.row(i), x);
    }
    r
}

/// Lower-triangular Cholesky factor of `A + ridge*I`, or None if a pivot is
/// not positive.
fn cholesky(a: &Mat, ridge: f64) -> Option<Mat> {
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j) + ridge;
        for k in 0..j {
            let v = l.get(j, k);
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l.set(j, j, dj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / dj);
        }
    }
    Some(l)
}

fn chol_solve(l: &Mat, rhs: &[f64]) -> Vec<f64> {
    let n = l.rows();
    // forward: L y = rhs
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    // backward: L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Singular values of `m` in non-increasing order, all non-negative.
/// One-sided Jacobi (Hestenes) on the columns of the tall orientation;
/// returns `min(rows, cols)` values.
pub fn svd_values(m: &Mat) -> Result<Vec<f64>> {
    m.check_finite("svd_values")?;
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Vec::new());
    }
    // Work tall so the number of columns equals the number of singular values.
    let work = if m.rows() < m.cols() { m.transpose() } else { m.clone() };
    let (rows, cols) = (work.rows(), work.cols());

    // Column-major copy for cache-friendly column rotations.
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j)).collect())
        .collect();

    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (cp, cq) = {
                    let (lo, hi) = col.split_at_mut(q);
                    (&mut lo[p], &mut hi[0])
                };
                let alpha = dot(cp, cp);
                let beta = dot(cq, cq);
                let gamma = dot(cp, cq);
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let vp = cp[i];
                    let vq = cq[i];
                    cp[i] = c * vp - s * vq;
                    cq[i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = col.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(sv)
}
