//! Evaluation and claim instrumentation: KNN probing, covariance spectra,
//! uniformity statistics, deviation-rate consistency, and the client
//! divergence bound. Labels enter here and nowhere else.

use crate::aggregator::{DeviationSet, UpdateDirection};
use crate::error::{Result, SimError};
use crate::numerics::{self, Mat};

/// Singular spectrum of a representation covariance matrix.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// Natural log of values floored at 1e-12.
    pub log_values: Vec<f64>,
    /// Exponential of the spectral entropy; 1 means complete collapse,
    /// the embedding dimension means a perfectly flat spectrum.
    pub effective_rank: f64,
}

/// Center the rows, form `Z^T Z / (n - 1)`, and report its singular spectrum
/// truncated to the top `min(d, 100)` values.
pub fn covariance_spectrum(z: &Mat) -> Result<SpectrumReport> {
    if z.rows() < 2 {
        return Err(SimError::dim("covariance_spectrum rows", ">= 2", z.rows()));
    }
    let n = z.rows();
    let d = z.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        numerics::axpy(1.0 / n as f64, z.row(i), &mut mean);
    }
    let centered = Mat::from_fn(n, d, |i, j| z.get(i, j) - mean[j]);
    let mut cov = Mat::zeros(d, d);
    for i in 0..n {
        let row = centered.row(i);
        for a in 0..d {
            let va = row[a];
            if va == 0.0 {
                continue;
            }
            for b in 0..d {
                let v = cov.get(a, b) + va * row[b] / (n as f64 - 1.0);
                cov.set(a, b, v);
            }
        }
    }
    let mut singular_values = numerics::svd_values(&cov)?;
    singular_values.truncate(d.min(100));
    let log_values: Vec<f64> = singular_values.iter().map(|v| v.max(1e-12).ln()).collect();

    let total: f64 = singular_values.iter().sum();
    let effective_rank = if total <= 0.0 {
        1.0 // degenerate spectrum maps to rank 1
    } else {
        let entropy: f64 = singular_values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let s = v / total;
                -s * s.ln()
            })
            .sum();
        entropy.exp()
    };
    Ok(SpectrumReport { singular_values, log_values, effective_rank })
}

/// Cosine-similarity k-nearest-neighbor majority vote; ties break toward the
/// smallest class id. `k` is clamped to the training size.
pub fn knn_eval(
    train_z: &Mat,
    train_labels: &[usize],
    test_z: &Mat,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if train_z.rows() == 0 || test_z.rows() == 0 {
        return Err(SimError::EmptyInput("knn_eval"));
    }
    if train_z.rows() != train_labels.len() || test_z.rows() != test_labels.len() {
        return Err(SimError::dim("knn labels", train_z.rows(), train_labels.len()));
    }
    if train_z.cols() != test_z.cols() {
        return Err(SimError::dim("knn embedding dim", train_z.cols(), test_z.cols()));
    }
    let k = k.max(1).min(train_z.rows());
    let num_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);

    let train_norms: Vec<f64> = (0..train_z.rows()).map(|i| numerics::norm(train_z.row(i))).collect();
    let mut correct = 0usize;
    for t in 0..test_z.rows() {
        let q = test_z.row(t);
        let qn = numerics::norm(q).max(1e-300);
        let mut sims: Vec<(f64, usize)> = (0..train_z.rows())
            .map(|i| {
                let denom = train_norms[i].max(1e-300) * qn;
                (numerics::dot(train_z.row(i), q) / denom, i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut votes = vec![0usize; num_classes];
        for &(_, idx) in sims.iter().take(k) {
            votes[train_labels[idx]] += 1;
        }
        let best = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
            .unwrap_or(0);
        if best == test_labels[t] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_z.rows() as f64)
}

/// Mean pairwise squared distance between rows; approaches 2 for uniformly
/// spread unit vectors as the dimension grows.
pub fn mean_pairwise_sq_dist(z: &Mat) -> f64 {
    let n = z.rows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += numerics::squared_dist(z.row(i), z.row(j));
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// First-order and exact deviation change rates for one server update.
#[derive(Debug, Clone)]
pub struct RateReport {
    /// `c_k = eta_global * <grad log u_k, d>`.
    pub first_order: Vec<f64>,
    /// `(u_k(theta) - u_k(theta - eta*d)) / (u_k + eps)`, reconstructed from
    /// the deviation set.
    pub exact: Vec<f64>,
}

/// Change rates of every client's squared deviation under the update
/// `theta <- theta - eta_global * d`. For clients whose gradient row was
/// zeroed by the eps floor, both rates are reported as 0.
pub fn deviation_rate_report(
    dev: &DeviationSet,
    dir: &UpdateDirection,
    eta_global: f64,
) -> RateReport {
    let k = dev.u.len();
    let d_norm_sq = numerics::dot(&dir.d, &dir.d);
    let mut first_order = Vec::with_capacity(k);
    let mut exact = Vec::with_capacity(k);
    for i in 0..k {
        let g = dev.grad_log_u.row(i);
        if g.iter().all(|&v| v == 0.0) {
            first_order.push(0.0);
            exact.push(0.0);
            continue;
        }
        let inner = numerics::dot(g, &dir.d);
        let fo = eta_global * inner;
        // u(theta - eta d) = u - eta u_tilde <g, d> + eta^2 ||d||^2, using
        // theta - theta_k = (u_tilde / 2) g
        let u_tilde = dev.u[i] + dev.eps;
        let ex = eta_global * inner - eta_global * eta_global * d_norm_sq / u_tilde;
        first_order.push(fo);
        exact.push(ex);
    }
    RateReport { first_order, exact }
}

/// Client divergence bound: `lhs = sum_k p_k ||theta_g - theta_k||^2` against
/// `rhs = 4 lr^2 (steps - 1)^2 clip^2`. The bound presumes at least one
/// synchronization inside the window, so it is informative only for
/// `steps >= 2`; at `steps == 1` both sides are zero only right after a sync.
pub fn lemma1_check(
    p: &[f64],
    theta_g: &[f64],
    theta_list: &[Vec<f64>],
    lr: f64,
    steps: usize,
    clip: f64,
) -> (f64, f64, bool) {
    assert_eq!(p.len(), theta_list.len());
    let lhs: f64 = p
        .iter()
        .zip(theta_list)
        .map(|(pk, theta_k)| pk * numerics::squared_dist(theta_g, theta_k))
        .sum();
    let span = steps.saturating_sub(1) as f64;
    let rhs = 4.0 * lr * lr * span * span * clip * clip;
    (lhs, rhs, lhs <= rhs)
}
