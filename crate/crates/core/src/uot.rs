//! Unbalanced optimal transport with squared-norm marginal penalties.
//!
//! The uniformity regularizer couples a batch of unit-norm embeddings to a
//! set of spherical-Gaussian anchor samples through the plan `pi >= 0`
//! minimizing
//!
//! ```text
//!   <C, pi> + tau_a/2 ||row_sums(pi) - a||^2 + tau_b/2 ||col_sums(pi) - b||^2
//! ```
//!
//! which is a convex quadratic in `vec(pi)` with Hessian
//! `Q = tau_a Phi_r^T Phi_r + tau_b Phi_c^T Phi_c` for the row/column summing
//! operators `Phi_r = I_N (x) 1_M^T` and `Phi_c = 1_N^T (x) I_M`. `Q` is never
//! materialized (it is NM x NM); its action reduces to row and column sums.
//! The solver is projected steepest descent with the exact step
//! `eta* = g^T g / g^T Q g`, projection `max(0, .)`, and a step-halving guard
//! that keeps the recorded objective non-increasing.

use crate::error::{Result, SimError};
use crate::numerics::Mat;

/// One l2-penalized unbalanced transport instance.
#[derive(Debug, Clone)]
pub struct UotProblem {
    /// N x M nonnegative cost matrix, `C[i][j] = ||z_i - s_j||^2`.
    pub cost: Mat,
    /// Row-marginal targets (length N, sums to 1).
    pub a: Vec<f64>,
    /// Column-marginal targets (length M, sums to 1).
    pub b: Vec<f64>,
    pub tau_a: f64,
    pub tau_b: f64,
}

impl UotProblem {
    pub fn new(cost: Mat, a: Vec<f64>, b: Vec<f64>, tau_a: f64, tau_b: f64) -> Result<Self> {
        if a.len() != cost.rows() {
            return Err(SimError::dim("uot row marginals", cost.rows(), a.len()));
        }
        if b.len() != cost.cols() {
            return Err(SimError::dim("uot col marginals", cost.cols(), b.len()));
        }
        cost.check_finite("uot cost")?;
        Ok(UotProblem { cost, a, b, tau_a, tau_b })
    }

    /// Uniform marginals `a = 1/N`, `b = 1/M`.
    pub fn with_uniform_marginals(cost: Mat, tau_a: f64, tau_b: f64) -> Result<Self> {
        let n = cost.rows();
        let m = cost.cols();
        let a = vec![1.0 / n as f64; n];
        let b = vec![1.0 / m as f64; m];
        UotProblem::new(cost, a, b, tau_a, tau_b)
    }

    /// Independent coupling `a b^T`: feasible, strictly positive, and
    /// scale-matched to the marginals.
    pub fn independent_plan(&self) -> Mat {
        Mat::from_fn(self.cost.rows(), self.cost.cols(), |i, j| self.a[i] * self.b[j])
    }
}

/// Solved transport plan plus solve metadata.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub pi: Mat,
    pub iterations: usize,
    pub objective: f64,
    /// True if the relative objective decrease fell below tolerance before
    /// the iteration cap.
    pub converged: bool,
}

/// Squared-distance cost matrix between two sets of same-dimension rows.
/// For unit-norm rows every entry lies in `[0, 4]`.
pub fn build_cost(embeddings: &Mat, anchors: &Mat) -> Result<Mat> {
    if embeddings.cols() != anchors.cols() {
        return Err(SimError::dim(
            "build_cost embedding dim",
            embeddings.cols(),
            anchors.cols(),
        ));
    }
    let n = embeddings.rows();
    let m = anchors.rows();
    let mut c = Mat::zeros(n, m);
    for i in 0..n {
        let zi = embeddings.row(i);
        for j in 0..m {
            let sj = anchors.row(j);
            c.set(i, j, crate::numerics::squared_dist(zi, sj));
        }
    }
    Ok(c)
}

/// Full objective `<C, pi> + tau_a/2 ||rows - a||^2 + tau_b/2 ||cols - b||^2`.
pub fn objective(prob: &UotProblem, pi: &Mat) -> Result<f64> {
    check_plan_shape(prob, pi)?;
    let mut transport = 0.0;
    for (c, p) in prob.cost.data().iter().zip(pi.data()) {
        transport += c * p;
    }
    let rows = pi.row_sums();
    let cols = pi.col_sums();
    let pen_a: f64 = rows
        .iter()
        .zip(&prob.a)
        .map(|(r, a)| (r - a) * (r - a))
        .sum();
    let pen_b: f64 = cols
        .iter()
        .zip(&prob.b)
        .map(|(c, b)| (c - b) * (c - b))
        .sum();
    let value = transport + 0.5 * prob.tau_a * pen_a + 0.5 * prob.tau_b * pen_b;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SimError::NonFinite("uot objective"))
    }
}

/// Matrix-shaped image of `Q vec(pi)`: entry `(i, j)` equals
/// `tau_a * row_sum_i(pi) + tau_b * col_sum_j(pi)`.
pub fn apply_q(prob: &UotProblem, pi: &Mat) -> Result<Mat> {
    check_plan_shape(prob, pi)?;
    let rows = pi.row_sums();
    let cols = pi.col_sums();
    Ok(Mat::from_fn(pi.rows(), pi.cols(), |i, j| {
        prob.tau_a * rows[i] + prob.tau_b * cols[j]
    }))
}

/// Matrix form of the linear term `w = vec(C) - tau_a Phi_r^T a - tau_b Phi_c^T b`:
/// entry `(i, j)` is `C_ij - tau_a a_i - tau_b b_j`.
fn linear_term(prob: &UotProblem) -> Mat {
    Mat::from_fn(prob.cost.rows(), prob.cost.cols(), |i, j| {
        prob.cost.get(i, j) - prob.tau_a * prob.a[i] - prob.tau_b * prob.b[j]
    })
}

/// Projected steepest descent with exact step length.
///
/// Gradient: `g = Q vec(pi) + w`. Step: `eta* = g^T g / g^T Q g`, falling back
/// to a fixed 1e-3 step when the curvature `g^T Q g` vanishes (tau_a = tau_b
/// = 0 makes Q zero). Each candidate step is projected onto `pi >= 0` and
/// halved until the objective does not increase, so the recorded objective
/// sequence is non-increasing. Stops when the relative objective decrease
/// drops below `tol` or after `max_iters`.
pub fn solve(prob: &UotProblem, pi0: &Mat, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    check_plan_shape(prob, pi0)?;
    pi0.check_finite("uot initial plan")?;
    debug_assert!(pi0.data().iter().all(|&v| v >= 0.0), "pi0 must be nonnegative");

    let w = linear_term(prob);
    let mut pi = pi0.clone();
    let mut obj = objective(prob, &pi)?;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iters {
        let q_pi = apply_q(prob, &pi)?;
        let mut grad = q_pi;
        for (g, wv) in grad.data_mut().iter_mut().zip(w.data()) {
            *g += wv;
        }

        let g_dot_g: f64 = grad.data().iter().map(|g| g * g).sum();
        if g_dot_g == 0.0 {
            converged = true;
            break;
        }
        let qg = apply_q(prob, &grad)?;
        let curvature: f64 = grad.data().iter().zip(qg.data()).map(|(g, q)| g * q).sum();
        let mut step = if curvature <= 1e-30 {
            // Zero curvature happens when both penalties are off; take a
            // fixed small step under the same projection and guard.
            1e-3
        } else {
            g_dot_g / curvature
        };
        if !step.is_finite() {
            return Err(SimError::NonFinite("uot step length"));
        }

        // Projected step with halving until the objective is non-increasing.
        let mut candidate;
        let mut cand_obj;
        loop {
            candidate = pi.clone();
            for (p, g) in candidate.data_mut().iter_mut().zip(grad.data()) {
                *p = (*p - step * g).max(0.0);
            }
            cand_obj = objective(prob, &candidate)?;
            if cand_obj <= obj {
                break;
            }
            if step < 1e-18 {
                // No acceptable step exists at this point; keep the current
                // iterate so the recorded objective stays non-increasing.
                candidate = pi.clone();
                cand_obj = obj;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;

        if candidate.data() == pi.data() {
            // Projected fixed point: no coordinate can move, so further
            // iterations are no-ops.
            converged = true;
            break;
        }
        let decrease = obj - cand_obj;
        pi = candidate;
        let prev = obj;
        obj = cand_obj;
        if decrease <= tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    if !obj.is_finite() || !pi.is_finite() {
        return Err(SimError::NonFinite("uot solve result"));
    }
    Ok(TransportPlan {
        objective: objective(prob, &pi)?,
        pi,
        iterations,
        converged,
    })
}

/// Gradient of the transported-cost term with respect to the embeddings,
/// holding the plan fixed at its optimum: row `i` is
/// `sum_j 2 pi_ij (z_i - s_j)`. The marginal penalties do not depend on the
/// embeddings, so they contribute nothing.
pub fn grad_wrt_embeddings(embeddings: &Mat, anchors: &Mat, plan: &TransportPlan) -> Result<Mat> {
    if embeddings.cols() != anchors.cols() {
        return Err(SimError::dim(
            "grad embedding dim",
            embeddings.cols(),
            anchors.cols(),
        ));
    }
    if plan.pi.rows() != embeddings.rows() || plan.pi.cols() != anchors.rows() {
        return Err(SimError::dim(
            "grad plan shape",
            format!("{}x{}", embeddings.rows(), anchors.rows()),
            format!("{}x{}", plan.pi.rows(), plan.pi.cols()),
        ));
    }
    let d = embeddings.cols();
    let row_mass = plan.pi.row_sums();
    let mut grad = Mat::zeros(embeddings.rows(), d);
    for i in 0..embeddings.rows() {
        let zi = embeddings.row(i);
        let out = grad.row_mut(i);
        for (o, z) in out.iter_mut().zip(zi) {
            *o = 2.0 * row_mass[i] * z;
        }
        for j in 0..anchors.rows() {
            let p = plan.pi.get(i, j);
            if p == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(anchors.row(j)) {
                *o -= 2.0 * p * s;
            }
        }
    }
    Ok(grad)
}

fn check_plan_shape(prob: &UotProblem, pi: &Mat) -> Result<()> {
    if pi.rows() != prob.cost.rows() || pi.cols() != prob.cost.cols() {
        return Err(SimError::dim(
            "uot plan shape",
            format!("{}x{}", prob.cost.rows(), prob.cost.cols()),
            format!("{}x{}", pi.rows(), pi.cols()),
        ));
    }
    Ok(())
}
