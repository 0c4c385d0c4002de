//! Command implementations behind the `fedsim` binary: single runs, ablation
//! sweeps, and the oracle self-checks. Everything here is also callable from
//! tests so the acceptance suite can drive the exact CLI paths.

pub mod output;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedsim_core::aggregator;
use fedsim_core::config::{Aggregator, Config};
use fedsim_core::federation::{self, parallel_map_indexed};
use fedsim_core::numerics::{self, Mat, RngStream};
use fedsim_core::oracles;
use fedsim_core::ssl::{self, Encoder, EncoderDims, UotSettings};
use fedsim_core::uot;

use output::RunArtifacts;

/// Failure modes mapped to process exit codes: config errors exit 2,
/// numerical failures exit 3, tolerance violations and partial sweep
/// failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
    Tolerance(String),
    SweepCells(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Tolerance(_) | CliError::SweepCells(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Tolerance(m) => write!(f, "tolerance violated: {m}"),
            CliError::SweepCells(n) => write!(f, "{n} sweep cell(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

fn read_config(path: &Path, overrides: &[String]) -> Result<(Config, String), CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = Config::parse_str(&raw).map_err(|e| CliError::Config(e.to_string()))?;
    for pair in overrides {
        cfg.apply_override(pair)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, raw))
}

/// `fedsim run`: execute one training run and persist its artifacts.
pub fn cmd_run(
    config_path: &Path,
    overrides: &[String],
    out_dir: &Path,
    jobs: usize,
) -> Result<(), CliError> {
    let (cfg, raw) = read_config(config_path, overrides)?;
    let summary = execute_cell(&cfg, &raw, overrides, out_dir, jobs)?;
    println!(
        "run complete: {} rounds, final knn {}, wrote {}",
        cfg.rounds,
        summary
            .final_knn
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}")),
        out_dir.display()
    );
    Ok(())
}

/// Final metrics of one executed cell.
pub struct CellSummary {
    pub final_knn: Option<f64>,
    pub final_effective_rank: Option<f64>,
}

/// Run one configuration and write metrics.csv, spectra.csv, embeddings.csv
/// and manifest.json into `out_dir`.
pub fn execute_cell(
    cfg: &Config,
    raw_config: &str,
    overrides: &[String],
    out_dir: &Path,
    jobs: usize,
) -> Result<CellSummary, CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let artifacts = RunArtifacts::new(out_dir);
    artifacts.write_manifest(cfg, raw_config, overrides, None)?;

    let started = Instant::now();
    let run = federation::run_with_jobs(cfg, jobs)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let elapsed = started.elapsed().as_secs_f64();

    artifacts.write_metrics(cfg, &run.records)?;
    artifacts.write_spectra(cfg, &run.records)?;
    artifacts.write_embeddings(cfg, &run)?;
    artifacts.write_manifest(cfg, raw_config, overrides, Some(elapsed))?;

    let last_eval = run.records.iter().rev().find_map(|r| r.eval.as_ref());
    Ok(CellSummary {
        final_knn: last_eval.map(|e| e.knn_accuracy),
        final_effective_rank: last_eval.map(|e| e.effective_rank),
    })
}

/// One cell of the ablation sweep grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub seed: u64,
    pub aggregator: Aggregator,
    pub lambda_u: f64,
    pub dir_name: String,
}

/// The sweep grid: seeds x aggregators x {lambda_u = base, lambda_u = 0}.
pub fn sweep_grid(cfg: &Config, seeds: &[u64], aggregators: &[Aggregator]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &seed in seeds {
        for &agg in aggregators {
            for &lambda in &[cfg.lambda_u, 0.0] {
                let fur = if lambda > 0.0 { "fur" } else { "nofur" };
                cells.push(SweepCell {
                    seed,
                    aggregator: agg,
                    lambda_u: lambda,
                    dir_name: format!("seed{}_{}_{}", seed, agg.as_str(), fur),
                });
            }
        }
    }
    cells
}

pub struct SweepRow {
    pub cell: SweepCell,
    pub status: Result<CellSummary, String>,
}

/// `fedsim sweep`: run the seeds x aggregator x uniformity grid, one
/// subdirectory per cell, continuing past per-cell failures.
pub fn cmd_sweep(
    config_path: &Path,
    seeds: &[u64],
    aggregators: &[Aggregator],
    out_dir: &Path,
    jobs: usize,
) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    let (base, raw) = read_config(config_path, &[])?;
    let cells = sweep_grid(&base, seeds, aggregators);
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    let rows: Vec<SweepRow> = parallel_map_indexed(cells.len(), jobs, |i| {
        let cell = cells[i].clone();
        let mut cfg = base.clone();
        cfg.seed = cell.seed;
        cfg.aggregator = cell.aggregator;
        cfg.lambda_u = cell.lambda_u;
        let overrides = vec![
            format!("seed={}", cell.seed),
            format!("aggregator={}", cell.aggregator.as_str()),
            format!("lambda_u={}", cell.lambda_u),
        ];
        let cell_dir = out_dir.join(&cell.dir_name);
        let status = execute_cell(&cfg, &raw, &overrides, &cell_dir, 1)
            .map_err(|e| e.to_string());
        SweepRow { cell, status }
    });

    output::write_summary(out_dir, &rows)?;
    let failed = rows.iter().filter(|r| r.status.is_err()).count();
    for row in &rows {
        match &row.status {
            Ok(s) => println!(
                "cell {}: knn {} effective_rank {}",
                row.cell.dir_name,
                s.final_knn.map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
                s.final_effective_rank
                    .map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
            ),
            Err(e) => println!("cell {}: FAILED ({e})", row.cell.dir_name),
        }
    }
    if failed > 0 {
        return Err(CliError::SweepCells(failed));
    }
    Ok(())
}

/// Median of a non-empty slice (midpoint convention for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite medians"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `fedsim oracle uot-dense`: the streaming objective and Q-application
/// against explicit Kronecker matrices on random instances.
pub fn oracle_uot_dense(n: usize, m: usize, trials: usize) -> Result<(), CliError> {
    let mut rng = RngStream::new(0xDE25E, 1);
    let mut max_disc = 0.0f64;
    for _ in 0..trials.max(1) {
        let cost = Mat::from_fn(n, m, |_, _| rng.uniform_in(0.0, 4.0));
        let prob = uot::UotProblem::with_uniform_marginals(cost, 0.8, 0.8)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let dense = oracles::DenseUot::build(&prob);
        let pi = Mat::from_fn(n, m, |_, _| rng.uniform_in(0.0, 1.0));
        let fast = uot::objective(&prob, &pi).map_err(|e| CliError::Numerical(e.to_string()))?;
        max_disc = max_disc.max((fast - dense.objective(&pi)).abs());
        let qa = uot::apply_q(&prob, &pi).map_err(|e| CliError::Numerical(e.to_string()))?;
        let qb = dense.apply_q_dense(&pi);
        for (x, y) in qa.data().iter().zip(qb.data()) {
            max_disc = max_disc.max((x - y).abs());
        }
    }
    println!("uot-dense max discrepancy: {max_disc:e} (tolerance 1e-10)");
    if max_disc < 1e-10 {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!("uot-dense discrepancy {max_disc:e}")))
    }
}

/// `fedsim oracle qp-grid`: ADMM weights against the exhaustive simplex-QP
/// oracle on random PSD Gram matrices.
pub fn oracle_qp_grid(k: usize, trials: usize) -> Result<(), CliError> {
    let mut rng = RngStream::new(0x9147D, 2);
    let eta_g = 1.0;
    let phi = 0.1;
    let scale = eta_g * eta_g / phi;
    let mut max_gap = 0.0f64;
    for _ in 0..trials.max(1) {
        let r = Mat::from_fn(k, k, |_, _| rng.next_gaussian());
        let g = r.transpose().matmul(&r);
        let g = Mat::from_fn(k, k, |i, j| 0.5 * (g.get(i, j) + g.get(j, i)));
        let w = aggregator::solve_weights_admm(&g, eta_g, phi, 1.0, 4000, 1e-10)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let q = Mat::from_fn(k, k, |i, j| scale * g.get(i, j));
        let (_, oracle_val) = oracles::simplex_qp_exact(&q);
        let mut quad = 0.0;
        for i in 0..k {
            quad += w.p[i] * numerics::dot(q.row(i), &w.p);
        }
        max_gap = max_gap.max((0.5 * quad - oracle_val).abs());
    }
    println!("qp-grid max dual objective gap: {max_gap:e} (tolerance 1e-6)");
    if max_gap < 1e-6 {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!("qp-grid gap {max_gap:e}")))
    }
}

/// `fedsim oracle gradcheck`: analytic gradients of the total loss (plans
/// frozen) and of `log u_k` against central finite differences.
pub fn oracle_gradcheck(trials: usize) -> Result<(), CliError> {
    let mut rng = RngStream::new(0x68AD, 3);
    let mut worst = 0.0f64;
    for trial in 0..trials.max(1) {
        let dims = EncoderDims { input: 6, hidden: 5, output: 3 };
        let enc = Encoder::init(dims, &mut rng);
        let x = Mat::from_fn(4, 6, |_, _| rng.next_gaussian());
        let views = ssl::augment(&x, &RngStream::new(77, trial as u64), 0.2, 0.0);
        let anchors1 = federation::gaussian_unit_rows(&mut rng, 4, 3);
        let anchors2 = federation::gaussian_unit_rows(&mut rng, 4, 3);
        let settings = UotSettings::default();
        let lambda = 0.3;
        let eval = ssl::total_loss_and_grad(&enc, &views, &anchors1, &anchors2, lambda, &settings)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let numeric = oracles::central_grad(
            |p| {
                let probe = Encoder::from_params(dims, p.to_vec());
                ssl::total_loss_frozen_plans(
                    &probe,
                    &views,
                    &anchors1,
                    &anchors2,
                    lambda,
                    &settings,
                    eval.plan1.as_ref(),
                    eval.plan2.as_ref(),
                )
                .expect("frozen-plan evaluation")
            },
            &enc.params,
            1e-5,
        );
        let scale = eval.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        worst = worst.max(oracles::max_relative_error(
            &eval.grad,
            &numeric,
            1e-3 * scale.max(1e-3),
        ));

        // gradient of log(u_k + eps) with respect to the global parameters
        let mgl = 10;
        let theta_g: Vec<f64> = (0..mgl).map(|_| rng.next_gaussian()).collect();
        let theta_k: Vec<f64> = (0..mgl).map(|_| rng.next_gaussian()).collect();
        let eps = 1e-12;
        let dev = aggregator::deviations(&theta_g, &[theta_k.clone()], eps);
        let numeric = oracles::central_grad(
            |t| (numerics::squared_dist(t, &theta_k) + eps).ln(),
            &theta_g,
            1e-6,
        );
        let analytic: Vec<f64> = dev.grad_log_u.row(0).to_vec();
        let gscale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        worst = worst.max(oracles::max_relative_error(
            &analytic,
            &numeric,
            1e-3 * gscale.max(1e-3),
        ));
    }
    println!("gradcheck max relative error: {worst:e} (tolerance 1e-4)");
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!("gradient error {worst:e}")))
    }
}

/// Locations of the artifacts a run writes.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn summary_path(dir: &Path) -> PathBuf {
    dir.join("summary.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }

    #[test]
    fn sweep_grid_shape() {
        let cfg = Config::default();
        let cells = sweep_grid(&cfg, &[1, 2, 3, 4, 5], &[Aggregator::FedAvg, Aggregator::Eua]);
        assert_eq!(cells.len(), 5 * 2 * 2);
        assert_eq!(cells[0].dir_name, "seed1_fedavg_fur");
        assert!(cells.iter().any(|c| c.dir_name == "seed5_eua_nofur"));
    }

    #[test]
    fn oracles_pass_at_default_sizes() {
        oracle_uot_dense(4, 4, 20).unwrap();
        oracle_qp_grid(3, 10).unwrap();
        oracle_gradcheck(3).unwrap();
    }
}
