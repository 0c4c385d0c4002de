//! Acceptance suite: every release criterion as one test, each printing a
//! single pass/fail line (run with `--nocapture` to see them on success).

use std::fs;
use std::time::Instant;

use fedsim_cli::{cmd_run, cmd_sweep, execute_cell, median, metrics_path, sweep_grid};
use fedsim_core::aggregator::{self, EuaSettings};
use fedsim_core::config::{Aggregator, Config, EuaBase};
use fedsim_core::diagnostics;
use fedsim_core::federation;
use fedsim_core::numerics::{self, Mat, RngStream};
use fedsim_core::oracles;
use fedsim_core::ssl::{self, Encoder, EncoderDims, UotSettings};
use fedsim_core::uot::{self, UotProblem};

fn report(criterion: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("acceptance criterion {criterion}: {verdict} - {detail}");
    assert!(ok, "criterion {criterion} failed: {detail}");
}

/// The smoke configuration: pinned shape, library defaults elsewhere.
fn smoke_config() -> Config {
    Config {
        clients: 4,
        num_classes: 4,
        dim: 8,
        embed_dim: 8,
        batch: 32,
        local_epochs: 2,
        rounds: 40,
        alpha: 0.1,
        ..Config::default()
    }
}

fn smoke_config_text() -> String {
    let cfg = smoke_config();
    cfg.to_key_values()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[test]
fn criterion_01_uot_oracle_equivalence() {
    let mut rng = RngStream::new(101, 1);
    let start = Instant::now();
    let mut max_pgd_gap = 0.0f64;
    let mut max_dense_gap = 0.0f64;
    for _ in 0..20 {
        let n = rng.next_index(5) + 1;
        let m = rng.next_index(5) + 1;
        let cost = Mat::from_fn(n, m, |_, _| rng.uniform_in(0.0, 4.0));
        let prob = UotProblem::with_uniform_marginals(cost, 0.8, 0.8).unwrap();
        let plan = uot::solve(&prob, &prob.independent_plan(), 500, 1e-8).unwrap();

        let (_, pgd_obj) = oracles::uot_pgd_longrun(&prob, 100_000);
        max_pgd_gap = max_pgd_gap.max((plan.objective - pgd_obj).abs());

        let dense = oracles::DenseUot::build(&prob);
        max_dense_gap = max_dense_gap.max((plan.objective - dense.objective(&plan.pi)).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "1 (uot oracle equivalence)",
        max_pgd_gap < 1e-6 && max_dense_gap < 1e-10 && elapsed < 1.0,
        &format!("pgd gap {max_pgd_gap:.2e} (<1e-6), dense gap {max_dense_gap:.2e} (<1e-10), {elapsed:.3}s (<1s)"),
    );
}

#[test]
fn criterion_02_one_by_one_closed_form() {
    let mut rng = RngStream::new(102, 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.uniform_in(0.0, 4.0);
        let tau_a = rng.uniform_in(0.1, 2.0);
        let tau_b = rng.uniform_in(0.1, 2.0);
        let prob = UotProblem::new(
            Mat::from_rows(&[vec![c]]),
            vec![1.0],
            vec![1.0],
            tau_a,
            tau_b,
        )
        .unwrap();
        let plan = uot::solve(&prob, &prob.independent_plan(), 500, 1e-14).unwrap();
        let expect = ((tau_a + tau_b - c) / (tau_a + tau_b)).max(0.0);
        worst = worst.max((plan.pi.get(0, 0) - expect).abs());
    }
    report(
        "2 (1x1 closed form)",
        worst < 1e-10,
        &format!("max |pi - closed form| = {worst:.2e} over 100 draws (<1e-10)"),
    );
}

#[test]
fn criterion_03_marginal_limit() {
    let mut rng = RngStream::new(103, 1);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let cost = Mat::from_fn(4, 4, |_, _| rng.uniform_in(0.0, 4.0));
        let prob = UotProblem::with_uniform_marginals(cost, 1e3, 1e3).unwrap();
        let plan = uot::solve(&prob, &prob.independent_plan(), 5000, 1e-14).unwrap();
        let rows = plan.pi.row_sums();
        let cols = plan.pi.col_sums();
        for (r, a) in rows.iter().zip(&prob.a) {
            worst = worst.max((r - a).abs());
        }
        for (c, b) in cols.iter().zip(&prob.b) {
            worst = worst.max((c - b).abs());
        }
    }
    report(
        "3 (marginal limit at tau=1e3)",
        worst < 5e-3,
        &format!("max marginal error {worst:.2e} (<5e-3)"),
    );
}

#[test]
fn criterion_04_gradient_checks() {
    // total-loss gradient with frozen plans
    let mut rng = RngStream::new(104, 1);
    let dims = EncoderDims { input: 6, hidden: 5, output: 3 };
    let mut worst_loss = 0.0f64;
    for trial in 0..3 {
        let enc = Encoder::init(dims, &mut rng);
        let x = Mat::from_fn(4, 6, |_, _| rng.next_gaussian());
        let views = ssl::augment(&x, &RngStream::new(200, trial), 0.2, 0.0);
        let anchors1 = federation::gaussian_unit_rows(&mut rng, 4, 3);
        let anchors2 = federation::gaussian_unit_rows(&mut rng, 4, 3);
        let settings = UotSettings::default();
        let eval = ssl::total_loss_and_grad(&enc, &views, &anchors1, &anchors2, 0.3, &settings).unwrap();
        let numeric = oracles::central_grad(
            |p| {
                let probe = Encoder::from_params(dims, p.to_vec());
                ssl::total_loss_frozen_plans(
                    &probe, &views, &anchors1, &anchors2, 0.3, &settings,
                    eval.plan1.as_ref(), eval.plan2.as_ref(),
                )
                .unwrap()
            },
            &enc.params,
            1e-5,
        );
        let scale = eval.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        worst_loss = worst_loss.max(oracles::max_relative_error(&eval.grad, &numeric, 1e-3 * scale.max(1e-3)));
    }

    // log-deviation gradient
    let mut worst_dev = 0.0f64;
    for _ in 0..3 {
        let theta_g: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
        let theta_k: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
        let dev = aggregator::deviations(&theta_g, &[theta_k.clone()], 1e-12);
        let numeric = oracles::central_grad(
            |t| (numerics::squared_dist(t, &theta_k) + 1e-12).ln(),
            &theta_g,
            1e-6,
        );
        let analytic: Vec<f64> = dev.grad_log_u.row(0).to_vec();
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        worst_dev = worst_dev.max(oracles::max_relative_error(&analytic, &numeric, 1e-3 * scale.max(1e-3)));
    }

    // step-halving: discrepancy between exact and first-order rates is
    // quadratic in the step, so halving the step should quarter it
    let theta_g: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
    let clients: Vec<Vec<f64>> = (0..3)
        .map(|_| theta_g.iter().map(|v| v + 0.5 * rng.next_gaussian()).collect())
        .collect();
    let dev = aggregator::deviations(&theta_g, &clients, 1e-12);
    let d_rand: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
    let d_norm = numerics::norm(&d_rand);
    let dir = aggregator::UpdateDirection {
        d: d_rand.iter().map(|v| v / d_norm).collect(),
        raw_norm: 1.0,
    };
    let disc = |eta: f64| {
        let rep = diagnostics::deviation_rate_report(&dev, &dir, eta);
        rep.first_order
            .iter()
            .zip(&rep.exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max)
    };
    let ratio = disc(0.02) / disc(0.01);

    report(
        "4 (gradient checks)",
        worst_loss < 1e-4 && worst_dev < 1e-4 && (3.0..=5.0).contains(&ratio),
        &format!("loss grad err {worst_loss:.2e} (<1e-4), log-dev grad err {worst_dev:.2e} (<1e-4), halving ratio {ratio:.3} (in [3,5])"),
    );
}

#[test]
fn criterion_05_dual_qp_vs_oracle() {
    let mut rng = RngStream::new(105, 1);
    let eta_g = 1.0;
    let phi = 0.1;
    let scale = eta_g * eta_g / phi;
    let mut max_gap = 0.0f64;
    let mut max_sum_err = 0.0f64;
    let mut min_coord = f64::INFINITY;
    for k in [2usize, 3] {
        for _ in 0..10 {
            let r = Mat::from_fn(k, k, |_, _| rng.next_gaussian());
            let g = r.transpose().matmul(&r);
            let g = Mat::from_fn(k, k, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)));
            let w = aggregator::solve_weights_admm(&g, eta_g, phi, 1.0, 1000, 1e-8).unwrap();
            let q = Mat::from_fn(k, k, |i, j| scale * g.get(i, j));
            let (_, oracle_val) = oracles::simplex_qp_exact(&q);
            let mut quad = 0.0;
            for i in 0..k {
                quad += w.p[i] * numerics::dot(q.row(i), &w.p);
            }
            max_gap = max_gap.max((0.5 * quad - oracle_val).abs());
            max_sum_err = max_sum_err.max((w.p.iter().sum::<f64>() - 1.0).abs());
            min_coord = min_coord.min(w.p.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }
    report(
        "5 (dual QP vs simplex oracle)",
        max_gap < 1e-6 && max_sum_err <= 1e-6 && min_coord >= 0.0,
        &format!("objective gap {max_gap:.2e} (<1e-6), |sum p - 1| {max_sum_err:.2e} (<=1e-6), min p {min_coord:.2e} (>=0)"),
    );
}

#[test]
fn criterion_06_equal_rate_stationarity() {
    let mut rng = RngStream::new(106, 1);
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

    // interior random instances
    let mut interior = 0;
    let mut worst_rel_spread = 0.0f64;
    let mut attempts = 0;
    while interior < 10 && attempts < 200 {
        attempts += 1;
        let m = 10;
        let theta_g: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
        let clients: Vec<Vec<f64>> = (0..3)
            .map(|_| theta_g.iter().map(|v| v + 0.5 * rng.next_gaussian()).collect())
            .collect();
        let out = aggregator::eua_aggregate(&theta_g, &clients, &[1, 1, 1], &settings).unwrap();
        if out.weights.p.iter().any(|&v| v <= 1e-6) {
            continue;
        }
        interior += 1;
        let mean = out.rates.iter().map(|c| c.abs()).sum::<f64>() / out.rates.len() as f64;
        let spread = out.rates.iter().cloned().fold(f64::MIN, f64::max)
            - out.rates.iter().cloned().fold(f64::MAX, f64::min);
        worst_rel_spread = worst_rel_spread.max(spread / mean.max(1e-300));
    }

    // exact symmetric construction
    let m = 8;
    let theta_g: Vec<f64> = (0..m).map(|_| rng.next_gaussian()).collect();
    let v: Vec<f64> = (0..m).map(|_| 0.2 * rng.next_gaussian()).collect();
    let up: Vec<f64> = theta_g.iter().zip(&v).map(|(a, b)| a + b).collect();
    let down: Vec<f64> = theta_g.iter().zip(&v).map(|(a, b)| a - b).collect();
    let out = aggregator::eua_aggregate(&theta_g, &[up, down], &[1, 1], &settings).unwrap();
    let p_err = (out.weights.p[0] - 0.5).abs().max((out.weights.p[1] - 0.5).abs());
    let d_norm = numerics::norm(&out.direction.d);

    report(
        "6 (equal-rate stationarity)",
        interior == 10 && worst_rel_spread <= 1e-4 && p_err <= 1e-9 && d_norm <= 1e-9,
        &format!("interior spread {worst_rel_spread:.2e} (<=1e-4) over {interior} instances, symmetric |p-1/2| {p_err:.2e} (<=1e-9), ||d|| {d_norm:.2e} (<=1e-9)"),
    );
}

#[test]
fn criterion_07_divergence_bound_over_smoke_run() {
    let cfg = Config { rounds: 20, ..smoke_config() };
    let out = federation::run(&cfg).unwrap();
    let mut all_checked = true;
    let mut all_ok = true;
    let mut max_ratio = 0.0f64;
    for rec in &out.records {
        all_checked &= rec.lemma1_checked;
        all_ok &= rec.lemma1_lhs <= rec.lemma1_rhs;
        max_ratio = max_ratio.max(rec.lemma1_lhs / rec.lemma1_rhs.max(1e-300));
    }
    report(
        "7 (client divergence bound)",
        all_checked && all_ok && out.records.len() == 20,
        &format!("bound held in all 20 rounds, max lhs/rhs = {max_ratio:.2e}"),
    );
}

#[test]
fn criteria_08_09_directional_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("smoke.cfg");
    fs::write(&cfg_path, smoke_config_text()).unwrap();
    let out_dir = tmp.path().join("sweep");
    let seeds = [1u64, 2, 3, 4, 5];

    let start = Instant::now();
    cmd_sweep(
        &cfg_path,
        &seeds,
        &[Aggregator::FedAvg, Aggregator::Eua],
        &out_dir,
        4,
    )
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let data_rows: Vec<&str> = summary
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("seed,") && !l.is_empty())
        .collect();

    // parse per-cell results: seed, aggregator, lambda_u, status, knn, rank
    struct Cell {
        seed: u64,
        agg: String,
        lambda: f64,
        knn: f64,
        rank: f64,
    }
    let cells: Vec<Cell> = data_rows
        .iter()
        .map(|row| {
            let parts: Vec<&str> = row.split(',').collect();
            assert_eq!(parts[3], "ok", "sweep cell failed: {row}");
            Cell {
                seed: parts[0].parse().unwrap(),
                agg: parts[1].to_string(),
                lambda: parts[2].parse().unwrap(),
                knn: parts[4].parse().unwrap(),
                rank: parts[5].parse().unwrap(),
            }
        })
        .collect();

    let select = |agg: &str, fur: bool| -> Vec<&Cell> {
        let mut v: Vec<&Cell> = cells
            .iter()
            .filter(|c| c.agg == agg && ((c.lambda > 0.0) == fur))
            .collect();
        v.sort_by_key(|c| c.seed);
        v
    };
    // the default aggregator of the smoke config is the full method
    let full = select("eua", true);
    let no_fur = select("eua", false);
    let fedavg_fur = select("fedavg", true);
    let no_eua_no_fur = select("fedavg", false);
    assert_eq!(full.len(), 5);

    let med = |cells: &[&Cell], f: &dyn Fn(&Cell) -> f64| -> f64 {
        median(&cells.iter().map(|c| f(c)).collect::<Vec<_>>())
    };
    let rank_fur = med(&full, &|c| c.rank);
    let rank_plain = med(&no_fur, &|c| c.rank);
    let knn_wins = full
        .iter()
        .zip(&no_fur)
        .filter(|(a, b)| a.knn >= b.knn)
        .count();
    report(
        "8 (directional uniformity effect)",
        rank_fur > rank_plain && knn_wins >= 4 && elapsed < 600.0,
        &format!(
            "median effective rank {rank_fur:.3} > {rank_plain:.3} (strict), knn wins {knn_wins}/5 (>=4), sweep {elapsed:.1}s (<600s)"
        ),
    );

    // ablation structure: grid complete with 5x2x2 rows; median comparison is
    // directional and reported rather than hard-failed
    let knn_full = med(&full, &|c| c.knn);
    let knn_no_fur = med(&no_fur, &|c| c.knn);
    let knn_no_eua = med(&fedavg_fur, &|c| c.knn);
    let _ = med(&no_eua_no_fur, &|c| c.knn);
    let directional_ok = knn_full >= knn_no_fur && knn_full >= knn_no_eua;
    let note = if directional_ok {
        format!("full-method median knn {knn_full:.3} >= ablations ({knn_no_fur:.3} without uniformity, {knn_no_eua:.3} without balancing)")
    } else {
        format!("REPORTED VIOLATION: full-method median knn {knn_full:.3} vs ablations ({knn_no_fur:.3} without uniformity, {knn_no_eua:.3} without balancing)")
    };
    report(
        "9 (ablation structure)",
        cells.len() == 20,
        &format!("grid complete with {} cells; {note}", cells.len()),
    );
}

#[test]
fn criterion_10_byte_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("det.cfg");
    fs::write(&cfg_path, "rounds = 6\nper_class = 24\nK = 3\nnum_classes = 3\nseed = 11\n").unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    cmd_run(&cfg_path, &[], &dir_a, 1).unwrap();
    cmd_run(&cfg_path, &[], &dir_b, 2).unwrap();
    let bytes_a = fs::read(metrics_path(&dir_a)).unwrap();
    let bytes_b = fs::read(metrics_path(&dir_b)).unwrap();
    report(
        "10 (determinism)",
        bytes_a == bytes_b,
        &format!("metrics.csv byte-identical across runs ({} bytes)", bytes_a.len()),
    );
}

#[test]
fn sweep_grid_matches_run_cell() {
    // one seed, one aggregator: the sweep's uniformity-on cell must be byte
    // identical to a direct run with the same settings
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("one.cfg");
    fs::write(&cfg_path, "rounds = 4\nper_class = 24\nK = 2\nnum_classes = 2\nseed = 5\n").unwrap();
    let sweep_dir = tmp.path().join("sweep");
    cmd_sweep(&cfg_path, &[5], &[Aggregator::Eua], &sweep_dir, 1).unwrap();

    let run_dir = tmp.path().join("single");
    cmd_run(&cfg_path, &[], &run_dir, 1).unwrap();

    let base = Config::parse_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let cells = sweep_grid(&base, &[5], &[Aggregator::Eua]);
    assert_eq!(cells.len(), 2);
    let cell_metrics = fs::read(metrics_path(&sweep_dir.join(&cells[0].dir_name))).unwrap();
    let run_metrics = fs::read(metrics_path(&run_dir)).unwrap();
    assert_eq!(cell_metrics, run_metrics, "sweep cell differs from direct run");
}

#[test]
fn execute_cell_reports_final_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Config { rounds: 2, clients: 2, num_classes: 2, per_class: 16, eval_every: 1, ..Config::default() };
    let summary = execute_cell(&cfg, "", &[], tmp.path(), 1).unwrap();
    assert!(summary.final_knn.is_some());
    assert!(summary.final_effective_rank.is_some());
}
