//! Independent reference implementations used to verify the fast paths.
//!
//! Everything in this module is deliberately naive: dense Kronecker matrices
//! where the solver uses row/column sums, long projected-gradient runs where
//! the solver uses exact steps, exhaustive support enumeration where the
//! aggregator runs ADMM, and central finite differences where the model uses
//! analytic gradients. None of it shares code with the paths it checks.

use crate::numerics::{dot, Mat};
use crate::uot::UotProblem;

/// Dense vectorized form of a UOT instance: explicit `Phi_r`, `Phi_c`,
/// `Q = tau_a Phi_r^T Phi_r + tau_b Phi_c^T Phi_c`, linear term `w`, and the
/// constant `Omega`. Uses row-major `vec(pi)`.
pub struct DenseUot {
    pub phi_r: Mat,
    pub phi_c: Mat,
    pub q: Mat,
    pub w: Vec<f64>,
    pub omega: f64,
    n: usize,
    m: usize,
}

impl DenseUot {
    pub fn build(prob: &UotProblem) -> DenseUot {
        let n = prob.cost.rows();
        let m = prob.cost.cols();
        let nm = n * m;
        // Phi_r = I_N (x) 1_M^T sums each row of pi.
        let phi_r = Mat::from_fn(n, nm, |i, col| if col / m == i { 1.0 } else { 0.0 });
        // Phi_c = 1_N^T (x) I_M sums each column of pi.
        let phi_c = Mat::from_fn(m, nm, |j, col| if col % m == j { 1.0 } else { 0.0 });

        let mut q = Mat::zeros(nm, nm);
        for r in 0..n {
            for x in 0..nm {
                for y in 0..nm {
                    let v = q.get(x, y)
                        + prob.tau_a * phi_r.get(r, x) * phi_r.get(r, y);
                    q.set(x, y, v);
                }
            }
        }
        for c in 0..m {
            for x in 0..nm {
                for y in 0..nm {
                    let v = q.get(x, y)
                        + prob.tau_b * phi_c.get(c, x) * phi_c.get(c, y);
                    q.set(x, y, v);
                }
            }
        }

        let mut w = Vec::with_capacity(nm);
        for i in 0..n {
            for j in 0..m {
                w.push(prob.cost.get(i, j) - prob.tau_a * prob.a[i] - prob.tau_b * prob.b[j]);
            }
        }
        let omega = 0.5
            * (prob.tau_a * dot(&prob.a, &prob.a) + prob.tau_b * dot(&prob.b, &prob.b));
        DenseUot { phi_r, phi_c, q, w, omega, n, m }
    }

    /// Objective evaluated in the quadratic form
    /// `1/2 v^T Q v + w^T v + Omega` with `v = vec(pi)`.
    pub fn objective(&self, pi: &Mat) -> f64 {
        let v = pi.data();
        let qv = self.apply_q_dense(pi);
        0.5 * dot(v, qv.data()) + dot(&self.w, v) + self.omega
    }

    /// `Q vec(pi)` through the explicit dense matrix, reshaped to N x M.
    pub fn apply_q_dense(&self, pi: &Mat) -> Mat {
        let v = pi.data();
        let nm = self.n * self.m;
        let mut out = vec![0.0; nm];
        for (x, o) in out.iter_mut().enumerate() {
            *o = dot(self.q.row(x), v);
        }
        Mat::from_vec(self.n, self.m, out)
    }

    /// Marginal residuals computed through the dense Phi operators.
    pub fn marginal_residuals(&self, pi: &Mat, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let v = pi.data();
        let rows: Vec<f64> = (0..self.n).map(|i| dot(self.phi_r.row(i), v) - a[i]).collect();
        let cols: Vec<f64> = (0..self.m).map(|j| dot(self.phi_c.row(j), v) - b[j]).collect();
        (rows, cols)
    }
}

/// Long-run projected gradient descent on the UOT objective with a slowly
/// diminishing step; the reference optimum for the exact-step solver. The
/// gradient is computed from the dense quadratic form, not `apply_q`.
pub fn uot_pgd_longrun(prob: &UotProblem, iters: usize) -> (Mat, f64) {
    let dense = DenseUot::build(prob);
    let n = prob.cost.rows() as f64;
    let m = prob.cost.cols() as f64;
    // spectral bound: ||Q|| <= tau_a * M + tau_b * N
    let lip = prob.tau_a * m + prob.tau_b * n;
    let base = if lip > 0.0 { 1.0 / lip } else { 1e-3 };

    let mut pi = prob.independent_plan();
    for t in 0..iters {
        let step = base / (1.0 + t as f64 / 5.0e4);
        let qv = dense.apply_q_dense(&pi);
        let mut next = pi.clone();
        let mut moved = false;
        for (idx, p) in next.data_mut().iter_mut().enumerate() {
            let g = qv.data()[idx] + dense.w[idx];
            let v = (*p - step * g).max(0.0);
            if v != *p {
                moved = true;
            }
            *p = v;
        }
        if !moved {
            break;
        }
        pi = next;
    }
    let obj = dense.objective(&pi);
    (pi, obj)
}

/// Exact simplex-constrained QP oracle for `min 1/2 p^T Q p` over
/// `p >= 0, sum p = 1` by exhaustive support enumeration with KKT
/// verification; falls back to the best feasible candidate if no support
/// passes the full KKT test (degenerate `Q`).
pub fn simplex_qp_exact(q: &Mat) -> (Vec<f64>, f64) {
    let k = q.rows();
    assert_eq!(q.cols(), k);
    assert!(k >= 1 && k <= 20, "support enumeration oracle is for small K");

    let value = |p: &[f64]| {
        let mut s = 0.0;
        for i in 0..k {
            s += p[i] * dot(q.row(i), p);
        }
        0.5 * s
    };

    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let consider = |p: Vec<f64>, kkt_ok: bool, best: &mut Option<(Vec<f64>, f64, bool)>| {
        if p.iter().any(|&v| v < -1e-12) {
            return;
        }
        let mut p = p;
        for v in p.iter_mut() {
            *v = v.max(0.0);
        }
        let sum: f64 = p.iter().sum();
        if sum <= 0.0 {
            return;
        }
        for v in p.iter_mut() {
            *v /= sum;
        }
        let val = value(&p);
        match best {
            Some((_, bv, bok)) => {
                // prefer KKT-verified solutions, then lower value
                if (kkt_ok && !*bok) || ((kkt_ok == *bok) && val < *bv - 0.0) {
                    *best = Some((p, val, kkt_ok));
                }
            }
            None => *best = Some((p, val, kkt_ok)),
        }
    };

    for support_bits in 1u32..(1u32 << k) {
        let support: Vec<usize> = (0..k).filter(|i| support_bits & (1 << i) != 0).collect();
        let s = support.len();
        if s == 1 {
            let mut p = vec![0.0; k];
            p[support[0]] = 1.0;
            let lambda = -dot(q.row(support[0]), &p);
            let kkt = (0..k).all(|i| dot(q.row(i), &p) + lambda >= -1e-9);
            consider(p, kkt, &mut best);
            continue;
        }
        // bordered KKT system: Q_SS p_S + lambda 1 = 0, sum p_S = 1
        let dim = s + 1;
        let mut sys = Mat::zeros(dim, dim);
        let mut rhs = vec![0.0; dim];
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                sys.set(r, c, q.get(i, j));
            }
            sys.set(r, s, 1.0);
            sys.set(s, r, 1.0);
        }
        rhs[s] = 1.0;
        let Some(sol) = solve_general(&sys, &rhs) else {
            continue;
        };
        let mut p = vec![0.0; k];
        for (r, &i) in support.iter().enumerate() {
            p[i] = sol[r];
        }
        if p.iter().any(|&v| v < -1e-10) {
            continue;
        }
        let lambda = sol[s];
        // dual feasibility off the support
        let kkt = (0..k).all(|i| {
            if support.contains(&i) {
                true
            } else {
                dot(q.row(i), &p) + lambda >= -1e-9
            }
        });
        consider(p, kkt, &mut best);
    }

    // uniform fallback covers fully degenerate Q (e.g. Q = 0)
    consider(vec![1.0 / k as f64; k], false, &mut best);
    let (p, v, _) = best.expect("at least the uniform candidate exists");
    (p, v)
}

/// Exhaustive grid search over the simplex at the given resolution;
/// localization-quality only, used to sanity-check the exact oracle.
pub fn simplex_qp_grid(q: &Mat, resolution: f64) -> (Vec<f64>, f64) {
    let k = q.rows();
    let steps = (1.0 / resolution).round() as usize;
    let value = |p: &[f64]| {
        let mut s = 0.0;
        for i in 0..k {
            s += p[i] * dot(q.row(i), p);
        }
        0.5 * s
    };
    let mut best_p = vec![0.0; k];
    let mut best_v = f64::INFINITY;
    let mut counts = vec![0usize; k];
    enumerate_compositions(steps, k, 0, &mut counts, &mut |cand: &[usize]| {
        let p: Vec<f64> = cand.iter().map(|&c| c as f64 / steps as f64).collect();
        let v = value(&p);
        if v < best_v {
            best_v = v;
            best_p = p;
        }
    });
    (best_p, best_v)
}

/// Visit every way of writing `remaining` as an ordered sum of `k` counts.
fn enumerate_compositions(
    remaining: usize,
    k: usize,
    idx: usize,
    counts: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if idx == k - 1 {
        counts[idx] = remaining;
        visit(counts);
        return;
    }
    for take in 0..=remaining {
        counts[idx] = take;
        enumerate_compositions(remaining - take, k, idx + 1, counts, visit);
    }
}

/// Dense LU solve with partial pivoting for small general (possibly
/// indefinite) systems; used by the KKT oracle, independent of `solve_spd`.
pub fn solve_general(a: &Mat, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(rhs.len(), n);
    let mut m = a.clone();
    let mut b = rhs.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if m.get(r, col).abs() > m.get(pivot, col).abs() {
                pivot = r;
            }
        }
        let pv = m.get(pivot, col);
        if pv.abs() < 1e-12 {
            return None;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = m.get(col, c);
                m.set(col, c, m.get(pivot, c));
                m.set(pivot, c, tmp);
            }
            b.swap(col, pivot);
        }
        for r in (col + 1)..n {
            let f = m.get(r, col) / m.get(col, col);
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                let v = m.get(r, c) - f * m.get(col, c);
                m.set(r, c, v);
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = b[r];
        for c in (r + 1)..n {
            s -= m.get(r, c) * x[c];
        }
        x[r] = s / m.get(r, r);
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Central-difference gradient of a scalar function.
pub fn central_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// Largest relative disagreement between two gradients, with a floor on the
/// denominator so zero entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(floor))
        .fold(0.0, f64::max)
}
