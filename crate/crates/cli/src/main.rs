use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim_cli::{cmd_run, cmd_sweep, oracle_gradcheck, oracle_qp_grid, oracle_uot_dense};
use fedsim_core::config::Aggregator;

/// Deterministic simulator of federated unsupervised representation learning.
#[derive(Parser)]
#[command(name = "fedsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one training run and write metrics under --out.
    Run {
        /// Path to a key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Repeated key=value overrides; last write wins.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Max concurrent clients.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the seeds x {fedavg,eua} x {uniformity on/off} ablation grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Aggregators to include.
        #[arg(long, value_delimiter = ',', default_values_t = [String::from("fedavg"), String::from("eua")])]
        aggregators: Vec<String>,
        #[arg(long, default_value = "out-sweep")]
        out: PathBuf,
        /// Max concurrent sweep cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare fast implementations against independent reference oracles.
    Oracle {
        #[command(subcommand)]
        check: OracleCmd,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Streaming UOT objective and Q-application vs dense Kronecker matrices.
    UotDense {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// ADMM simplex weights vs exhaustive support enumeration.
    QpGrid {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Analytic gradients vs central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, set, out, jobs } => cmd_run(&config, &set, &out, jobs.max(1)),
        Command::Sweep { config, seeds, aggregators, out, jobs } => {
            let mut aggs = Vec::new();
            for name in &aggregators {
                match name.as_str() {
                    "fedavg" => aggs.push(Aggregator::FedAvg),
                    "eua" => aggs.push(Aggregator::Eua),
                    other => {
                        eprintln!("config error: unknown aggregator `{other}` (fedavg|eua)");
                        return ExitCode::from(2);
                    }
                }
            }
            cmd_sweep(&config, &seeds, &aggs, &out, jobs.max(1))
        }
        Command::Oracle { check } => match check {
            OracleCmd::UotDense { n, m, trials } => oracle_uot_dense(n, m, trials),
            OracleCmd::QpGrid { k, trials } => oracle_qp_grid(k, trials),
            OracleCmd::Gradcheck { trials } => oracle_gradcheck(trials),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
