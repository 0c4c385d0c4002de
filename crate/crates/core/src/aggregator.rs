//! Server-side aggregation: the FedAvg baseline and the balanced aggregator
//! that equalizes client model-deviation change rates.
//!
//! The balanced update works on the squared deviations
//! `u_k = ||theta_g - theta_k||^2`. Their log-gradients
//! `grad log u_k = 2 (theta_g - theta_k) / (u_k + eps)` form a Gram matrix
//! `G`, and the client weights solve the dual QP
//!
//! ```text
//!   min_p  (eta_g^2 / 2 phi) p^T G p    s.t.  p >= 0,  sum(p) = 1
//! ```
//!
//! via ADMM. The server then moves against the weighted log-gradient
//! direction `d = (eta_g / phi) (grad log u)^T p`, normalized to the unit
//! ball.

use crate::config::EuaBase;
use crate::error::{Result, SimError};
use crate::numerics::{self, solve_spd, Mat};

/// Sample-count weighted mean of client parameter vectors.
pub fn fedavg(theta_list: &[Vec<f64>], sample_counts: &[usize]) -> Result<Vec<f64>> {
    if theta_list.is_empty() {
        return Err(SimError::EmptyInput("fedavg"));
    }
    if theta_list.len() != sample_counts.len() {
        return Err(SimError::dim("fedavg counts", theta_list.len(), sample_counts.len()));
    }
    if sample_counts.iter().any(|&c| c == 0) {
        return Err(SimError::EmptyInput("fedavg sample count"));
    }
    let total: f64 = sample_counts.iter().map(|&c| c as f64).sum();
    let dim = theta_list[0].len();
    let mut out = vec![0.0; dim];
    for (theta, &count) in theta_list.iter().zip(sample_counts) {
        if theta.len() != dim {
            return Err(SimError::dim("fedavg params", dim, theta.len()));
        }
        numerics::axpy(count as f64 / total, theta, &mut out);
    }
    Ok(out)
}

/// Squared deviations of every client from the global model together with the
/// gradients of their logs.
#[derive(Debug, Clone)]
pub struct DeviationSet {
    /// `u_k = ||theta_g - theta_k||^2`.
    pub u: Vec<f64>,
    /// Floor added before taking logs; rows with `u_k <= eps` are zeroed.
    pub eps: f64,
    /// K x m matrix with rows `2 (theta_g - theta_k) / (u_k + eps)`.
    pub grad_log_u: Mat,
}

pub fn deviations(theta_g: &[f64], theta_list: &[Vec<f64>], eps: f64) -> DeviationSet {
    let k = theta_list.len();
    let m = theta_g.len();
    let mut u = Vec::with_capacity(k);
    let mut grad = Mat::zeros(k, m);
    for (i, theta_k) in theta_list.iter().enumerate() {
        assert_eq!(theta_k.len(), m, "client parameter length mismatch");
        let uk = numerics::squared_dist(theta_g, theta_k);
        u.push(uk);
        if uk > eps {
            let scale = 2.0 / (uk + eps);
            let row = grad.row_mut(i);
            for (r, (g, c)) in theta_g.iter().zip(theta_k).enumerate() {
                row[r] = scale * (g - c);
            }
        }
    }
    DeviationSet { u, eps, grad_log_u: grad }
}

/// Gram matrix of the log-deviation gradients: `G_kl = <grad_k, grad_l>`,
/// symmetric positive semi-definite.
pub fn gram(dev: &DeviationSet) -> Mat {
    let k = dev.u.len();
    let mut g = Mat::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = numerics::dot(dev.grad_log_u.row(i), dev.grad_log_u.row(j));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    g
}

/// Aggregation weights from the ADMM dual solve.
#[derive(Debug, Clone)]
pub struct AggWeights {
    /// Simplex weights: nonnegative, summing to one after the final safeguard.
    pub p: Vec<f64>,
    /// Final multiplier of the sum constraint.
    pub mu: f64,
    pub admm_iters: usize,
    /// `|sum(p) - 1|` before the final renormalization.
    pub primal_residual: f64,
    /// False if the iteration cap was reached before the residuals met the
    /// tolerance; non-fatal.
    pub converged: bool,
    /// Dual objective `(eta_g^2 / 2 phi) p^T G p` after each iteration.
    pub objective_trace: Vec<f64>,
}

/// Solve `min (eta_g^2 / 2 phi) p^T G p` over the simplex with ADMM.
///
/// The quadratic-plus-equality block is minimized exactly via a bordered KKT
/// solve (Schur complement on `solve_spd`), the nonnegativity constraint is
/// carried by the splitting variable, and a scaled dual accumulates the gap.
/// The QP is internally normalized by `||Q||_inf` — the argmin is invariant
/// to objective scale and this keeps `rho` well matched.
pub fn solve_weights_admm(
    g: &Mat,
    eta_g: f64,
    phi: f64,
    rho: f64,
    max_iters: usize,
    tol: f64,
) -> Result<AggWeights> {
    let k = g.rows();
    assert!(k >= 1, "need at least one client");
    assert!(phi > 0.0 && rho > 0.0);
    g.check_finite("gram matrix")?;

    let scale = eta_g * eta_g / phi;
    let objective = |p: &[f64]| {
        let mut s = 0.0;
        for i in 0..k {
            s += p[i] * numerics::dot(g.row(i), p);
        }
        0.5 * scale * s
    };

    if k == 1 {
        return Ok(AggWeights {
            p: vec![1.0],
            mu: -scale * g.get(0, 0),
            admm_iters: 0,
            primal_residual: 0.0,
            converged: true,
            objective_trace: vec![objective(&[1.0])],
        });
    }

    // normalized quadratic: q_hat = (scale / norm) G
    let q_scale = scale * g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if q_scale > 0.0 { q_scale } else { 1.0 };
    let m = Mat::from_fn(k, k, |i, j| {
        scale * g.get(i, j) / norm + if i == j { rho } else { 0.0 }
    });

    // constant column of the bordered solve: z2 = M^{-1} 1
    let ones = vec![1.0; k];
    let z2 = solve_spd(&m, &ones)?;
    let z2_sum: f64 = z2.iter().sum();
    if z2_sum.abs() < 1e-300 {
        return Err(SimError::Singular);
    }

    let uniform = vec![1.0 / k as f64; k];
    let mut q = uniform.clone();
    let mut y = vec![0.0; k];
    let mut p = uniform;
    let mut nu = 0.0;
    let mut iters = 0;
    let mut converged = false;
    let mut trace = Vec::new();

    for _ in 0..max_iters {
        iters += 1;
        // p-step: min 1/2 p^T Qhat p + rho/2 ||p - q + y||^2  s.t. sum p = 1
        let rhs: Vec<f64> = q.iter().zip(&y).map(|(qi, yi)| rho * (qi - yi)).collect();
        let z1 = solve_spd(&m, &rhs)?;
        let z1_sum: f64 = z1.iter().sum();
        nu = (z1_sum - 1.0) / z2_sum;
        for i in 0..k {
            p[i] = z1[i] - nu * z2[i];
        }
        trace.push(objective(&p));

        // q-step: projection onto the nonnegative orthant
        let q_prev = q.clone();
        for i in 0..k {
            q[i] = (p[i] + y[i]).max(0.0);
        }
        // dual update on the splitting constraint p = q
        let mut primal = 0.0f64;
        let mut dual = 0.0f64;
        for i in 0..k {
            y[i] += p[i] - q[i];
            primal = primal.max((p[i] - q[i]).abs());
            dual = dual.max(rho * (q[i] - q_prev[i]).abs());
        }
        if primal < tol && dual < tol {
            converged = true;
            break;
        }
    }

    // q is exactly nonnegative; renormalize to the simplex as a safeguard and
    // report how far its mass was from 1 beforehand.
    let mass: f64 = q.iter().sum();
    let primal_residual = (mass - 1.0).abs();
    let p_out = if mass > 1e-300 {
        q.iter().map(|v| v / mass).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    if !numerics::all_finite(&p_out) {
        return Err(SimError::NonFinite("aggregation weights"));
    }
    Ok(AggWeights {
        p: p_out,
        mu: nu * norm, // multiplier of the unnormalized problem
        admm_iters: iters,
        primal_residual,
        converged,
        objective_trace: trace,
    })
}

/// Server update direction, scaled into the unit ball.
#[derive(Debug, Clone)]
pub struct UpdateDirection {
    pub d: Vec<f64>,
    /// Norm of `(eta_g / phi) (grad log u)^T p` before normalization.
    pub raw_norm: f64,
}

/// `d = (eta_g / phi) sum_k p_k grad log u_k`, rescaled to unit norm whenever
/// it leaves the unit ball.
pub fn direction(dev: &DeviationSet, w: &AggWeights, eta_g: f64, phi: f64) -> UpdateDirection {
    let m = dev.grad_log_u.cols();
    let mut d = vec![0.0; m];
    for (i, &pk) in w.p.iter().enumerate() {
        numerics::axpy(eta_g / phi * pk, dev.grad_log_u.row(i), &mut d);
    }
    let raw_norm = numerics::norm(&d);
    if raw_norm > 1.0 {
        for v in d.iter_mut() {
            *v /= raw_norm;
        }
    }
    UpdateDirection { d, raw_norm }
}

/// Settings of the balanced aggregator, mirroring the config keys.
#[derive(Debug, Clone, Copy)]
pub struct EuaSettings {
    pub eta_g: f64,
    pub phi: f64,
    pub rho: f64,
    pub eta_global: f64,
    pub admm_max_iters: usize,
    pub admm_tol: f64,
    pub dev_eps: f64,
    pub base: EuaBase,
}

/// Everything one balanced aggregation produces.
pub struct EuaOutcome {
    pub new_global: Vec<f64>,
    pub weights: AggWeights,
    pub direction: UpdateDirection,
    pub deviations: DeviationSet,
    /// First-order deviation change rates `c_k = eta_global <grad_k, d>`.
    pub rates: Vec<f64>,
}

/// Full pipeline: deviations -> Gram -> ADMM weights -> direction -> update.
/// With `base = FedAvg` the whole pipeline is evaluated at the sample-weighted
/// client mean instead of the previous global model.
pub fn eua_aggregate(
    theta_g: &[f64],
    theta_list: &[Vec<f64>],
    sample_counts: &[usize],
    settings: &EuaSettings,
) -> Result<EuaOutcome> {
    if theta_list.is_empty() {
        return Err(SimError::EmptyInput("eua_aggregate"));
    }
    let base = match settings.base {
        EuaBase::Keep => theta_g.to_vec(),
        EuaBase::FedAvg => fedavg(theta_list, sample_counts)?,
    };
    let dev = deviations(&base, theta_list, settings.dev_eps);
    let g = gram(&dev);
    let weights = solve_weights_admm(
        &g,
        settings.eta_g,
        settings.phi,
        settings.rho,
        settings.admm_max_iters,
        settings.admm_tol,
    )?;
    let dir = direction(&dev, &weights, settings.eta_g, settings.phi);
    let mut new_global = base;
    numerics::axpy(-settings.eta_global, &dir.d, &mut new_global);
    if !numerics::all_finite(&new_global) {
        return Err(SimError::NonFinite("global update"));
    }
    let rates: Vec<f64> = (0..theta_list.len())
        .map(|i| settings.eta_global * numerics::dot(dev.grad_log_u.row(i), &dir.d))
        .collect();
    Ok(EuaOutcome { new_global, weights, direction: dir, deviations: dev, rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::oracles;

    fn random_psd(rng: &mut RngStream, k: usize) -> Mat {
        let r = Mat::from_fn(k, k, |_, _| rng.next_gaussian());
        let g = r.transpose().matmul(&r);
        Mat::from_fn(k, k, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)))
    }

    #[test]
    fn fedavg_reference_points() {
        let a = vec![vec![0.0]];
        assert_eq!(fedavg(&a, &[3]).unwrap(), vec![0.0]);
        let two = vec![vec![0.0], vec![2.0]];
        assert_eq!(fedavg(&two, &[5, 5]).unwrap(), vec![1.0]);
        let weighted = vec![vec![0.0], vec![4.0]];
        assert_eq!(fedavg(&weighted, &[1, 3]).unwrap(), vec![3.0]);
        assert!(matches!(fedavg(&[], &[]), Err(SimError::EmptyInput(_))));
    }

    #[test]
    fn deviations_formula_and_eps_floor() {
        let dev = deviations(&[1.0, 0.0], &[vec![0.0, 0.0]], 1e-12);
        assert!((dev.u[0] - 1.0).abs() < 1e-15);
        assert!((dev.grad_log_u.get(0, 0) - 2.0).abs() < 1e-9);
        assert!(dev.grad_log_u.get(0, 1).abs() < 1e-15);

        let same = deviations(&[1.0, 0.0], &[vec![1.0, 0.0]], 1e-12);
        assert_eq!(same.u[0], 0.0);
        assert!(same.grad_log_u.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deviation_log_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(71, 1);
        let m = 6;
        let theta_g: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
        let theta_k: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
        let eps = 1e-12;
        let dev = deviations(&theta_g, &[theta_k.clone()], eps);

        let numeric = oracles::central_grad(
            |t| (numerics::squared_dist(t, &theta_k) + eps).ln(),
            &theta_g,
            1e-6,
        );
        for (a, n) in dev.grad_log_u.row(0).iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn gram_shapes_and_psd() {
        let mut rng = RngStream::new(72, 2);
        let theta_g: Vec<f64> = (0..10).map(|_| rng.next_gaussian()).collect();
        let clients: Vec<Vec<f64>> = (0..4)
            .map(|_| theta_g.iter().map(|v| v + 0.3 * rng.next_gaussian()).collect())
            .collect();
        let dev = deviations(&theta_g, &clients, 1e-12);
        let g = gram(&dev);
        assert_eq!((g.rows(), g.cols()), (4, 4));
        // PSD check: x^T G x >= 0 for random probes
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.next_gaussian()).collect();
            let mut quad = 0.0;
            for i in 0..4 {
                quad += x[i] * numerics::dot(g.row(i), &x);
            }
            assert!(quad >= -1e-10, "quadratic form {quad}");
        }
        // single client: 1x1 matrix equal to its squared gradient norm
        let one = deviations(&theta_g, &clients[..1], 1e-12);
        let g1 = gram(&one);
        let expect = numerics::dot(one.grad_log_u.row(0), one.grad_log_u.row(0));
        assert!((g1.get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn admm_single_client_and_symmetric_pair() {
        let g = Mat::from_rows(&[vec![3.7]]);
        let w = solve_weights_admm(&g, 1.0, 0.1, 1.0, 100, 1e-8).unwrap();
        assert_eq!(w.p, vec![1.0]);

        // exchange-symmetric 2x2: equal diagonal, any off-diagonal
        let g = Mat::from_rows(&[vec![2.0, 0.7], vec![0.7, 2.0]]);
        let w = solve_weights_admm(&g, 1.0, 0.1, 1.0, 1000, 1e-10).unwrap();
        assert!((w.p[0] - 0.5).abs() < 1e-9 && (w.p[1] - 0.5).abs() < 1e-9);
        assert!(w.converged);
    }

    #[test]
    fn admm_matches_exact_oracle_on_random_instances() {
        let mut rng = RngStream::new(73, 3);
        let eta_g = 1.0;
        let phi = 0.1;
        let scale = eta_g * eta_g / phi;
        for k in [2usize, 3] {
            for trial in 0..10 {
                let g = random_psd(&mut rng, k);
                let w = solve_weights_admm(&g, eta_g, phi, 1.0, 2000, 1e-10).unwrap();
                let q = Mat::from_fn(k, k, |i, j| scale * g.get(i, j));
                let (_, oracle_val) = oracles::simplex_qp_exact(&q);
                let mut quad = 0.0;
                for i in 0..k {
                    quad += w.p[i] * numerics::dot(q.row(i), &w.p);
                }
                let admm_val = 0.5 * quad;
                assert!(
                    (admm_val - oracle_val).abs() < 1e-6,
                    "k={k} trial {trial}: admm {admm_val} oracle {oracle_val}"
                );
                assert!(w.p.iter().all(|&v| v >= 0.0));
                assert!((w.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn admm_objective_trace_monotone_on_interior_instances() {
        let mut rng = RngStream::new(74, 4);
        let mut seen = 0;
        for _ in 0..20 {
            let mut g = random_psd(&mut rng, 3);
            for i in 0..3 {
                let v = g.get(i, i) + 1.0; // diagonal dominance favors interior optima
                g.set(i, i, v);
            }
            let w = solve_weights_admm(&g, 1.0, 0.5, 1.0, 2000, 1e-10).unwrap();
            if w.p.iter().all(|&v| v > 1e-6) {
                seen += 1;
                for pair in w.objective_trace.windows(2) {
                    assert!(pair[1] <= pair[0] + 1e-8, "trace increased: {pair:?}");
                }
            }
        }
        assert!(seen >= 5, "expected interior instances, saw {seen}");
    }

    #[test]
    fn admm_argmin_invariant_under_gram_rescaling() {
        let mut rng = RngStream::new(75, 5);
        let g = random_psd(&mut rng, 3);
        let w1 = solve_weights_admm(&g, 1.0, 0.1, 1.0, 4000, 1e-11).unwrap();
        let c2 = 100.0; // every gradient row scaled by 10
        let scaled = Mat::from_fn(3, 3, |i, j| c2 * g.get(i, j));
        let w2 = solve_weights_admm(&scaled, 1.0, 0.1, 1.0, 4000, 1e-11).unwrap();
        for (a, b) in w1.p.iter().zip(&w2.p) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn kkt_residual_on_active_coordinates() {
        let mut rng = RngStream::new(76, 6);
        for _ in 0..10 {
            let g = random_psd(&mut rng, 3);
            let scale = 1.0 / 0.1;
            let w = solve_weights_admm(&g, 1.0, 0.1, 1.0, 4000, 1e-10).unwrap();
            if !w.converged {
                continue;
            }
            // stationarity gradient of the scaled QP at the solution
            for i in 0..3 {
                if w.p[i] < 1e-9 {
                    let grad_i = scale * numerics::dot(g.row(i), &w.p) + w.mu;
                    let residual = (-grad_i).max(0.0);
                    assert!(residual <= 1e-6, "active KKT residual {residual}");
                }
            }
        }
    }

    #[test]
    fn direction_normalization_and_zero_case() {
        let theta_g = vec![0.0, 0.0];
        let dev = deviations(&theta_g, &[theta_g.clone()], 1e-12);
        let w = AggWeights {
            p: vec![1.0],
            mu: 0.0,
            admm_iters: 0,
            primal_residual: 0.0,
            converged: true,
            objective_trace: vec![],
        };
        let dir = direction(&dev, &w, 1.0, 0.1);
        assert_eq!(dir.d, vec![0.0, 0.0]);
        assert_eq!(dir.raw_norm, 0.0);

        let dev = deviations(&[1.0, 0.0], &[vec![0.0, 0.0]], 1e-12);
        let dir = direction(&dev, &w, 1.0, 0.1);
        let n = numerics::norm(&dir.d);
        assert!((n - 1.0).abs() < 1e-12, "norm {n}");
        assert!(dir.raw_norm > 1.0);
        // parallel to the single gradient row
        let g0 = dev.grad_log_u.row(0);
        let cosine = numerics::dot(&dir.d, g0) / (n * numerics::norm(g0));
        assert!((cosine - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_clients_leave_global_unchanged() {
        let theta_g = vec![0.3, -0.7, 1.1];
        let clients = vec![theta_g.clone(), theta_g.clone(), theta_g.clone()];
        let settings = EuaSettings {
            eta_g: 1.0,
            phi: 0.1,
            rho: 1.0,
            eta_global: 0.5,
            admm_max_iters: 500,
            admm_tol: 1e-9,
            dev_eps: 1e-12,
            base: EuaBase::Keep,
        };
        let out = eua_aggregate(&theta_g, &clients, &[1, 1, 1], &settings).unwrap();
        assert_eq!(out.new_global, theta_g);
        for pk in &out.weights.p {
            assert!((pk - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_two_client_case_is_a_fixed_point() {
        let mut rng = RngStream::new(77, 7);
        let m = 8;
        let theta_g: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
        let v: Vec<f64> = (0..m).map(|_| 0.2 * rng.next_gaussian()).collect();
        let up: Vec<f64> = theta_g.iter().zip(&v).map(|(a, b)| a + b).collect();
        let down: Vec<f64> = theta_g.iter().zip(&v).map(|(a, b)| a - b).collect();
        let settings = EuaSettings {
            eta_g: 1.0,
            phi: 0.1,
            rho: 1.0,
            eta_global: 0.5,
            admm_max_iters: 2000,
            admm_tol: 1e-12,
            dev_eps: 1e-12,
            base: EuaBase::Keep,
        };
        let out = eua_aggregate(&theta_g, &[up, down], &[1, 1], &settings).unwrap();
        assert!((out.weights.p[0] - 0.5).abs() < 1e-9);
        assert!((out.weights.p[1] - 0.5).abs() < 1e-9);
        // opposite gradient rows cancel exactly
        assert!(numerics::norm(&out.direction.d) < 1e-9);
        for (a, b) in out.new_global.iter().zip(&theta_g) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((out.rates[0] - out.rates[1]).abs() < 1e-12);
    }

    #[test]
    fn interior_solutions_equalize_change_rates() {
        let mut rng = RngStream::new(78, 8);
        let mut interior_seen = 0;
        for _ in 0..20 {
            let m = 10;
            let theta_g: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
            let clients: Vec<Vec<f64>> = (0..3)
                .map(|_| theta_g.iter().map(|v| v + 0.5 * rng.next_gaussian()).collect())
                .collect();
            let settings = EuaSettings {
                eta_g: 1.0,
                phi: 0.1,
                rho: 1.0,
                eta_global: 0.05,
                admm_max_iters: 5000,
                admm_tol: 1e-12,
                dev_eps: 1e-12,
                base: EuaBase::Keep,
            };
            let out = eua_aggregate(&theta_g, &clients, &[1, 1, 1], &settings).unwrap();
            if out.weights.p.iter().any(|&v| v <= 1e-6) {
                continue; // equal rates hold on the support only
            }
            interior_seen += 1;
            let mean = out.rates.iter().map(|c| c.abs()).sum::<f64>() / 3.0;
            let spread = out.rates.iter().cloned().fold(f64::MIN, f64::max)
                - out.rates.iter().cloned().fold(f64::MAX, f64::min);
            assert!(
                spread <= 1e-4 * mean.max(1e-300),
                "rate spread {spread} vs mean magnitude {mean}"
            );
        }
        assert!(interior_seen >= 3, "too few interior instances: {interior_seen}");
    }
}
