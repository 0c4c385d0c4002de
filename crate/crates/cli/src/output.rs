//! Artifact writers: metrics.csv, spectra.csv, embeddings.csv, manifest.json
//! and the sweep summary. All files are UTF-8 with LF newlines and `.`
//! decimal separators; a schema version string heads each CSV.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use fedsim_core::config::Config;
use fedsim_core::federation::{RunOutput, RunRecord};
use fedsim_core::ssl::Encoder;

use crate::{CliError, SweepRow};

pub const METRICS_SCHEMA: &str = "# fedsim.metrics.v1";
pub const SPECTRA_SCHEMA: &str = "# fedsim.spectra.v1";
pub const EMBEDDINGS_SCHEMA: &str = "# fedsim.embeddings.v1";
pub const SUMMARY_SCHEMA: &str = "# fedsim.summary.v1";

pub struct RunArtifacts {
    dir: PathBuf,
    started_unix: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seeds: Vec<u64>,
    output_dir: String,
    /// Byte-identical copy of the parsed config file.
    config_snapshot: &'a str,
    overrides: &'a [String],
    resolved_config: Vec<(String, String)>,
    started_unix: u64,
    duration_seconds: Option<f64>,
}

impl RunArtifacts {
    pub fn new(dir: &Path) -> RunArtifacts {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunArtifacts { dir: dir.to_path_buf(), started_unix }
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }

    /// Written before training starts; rewritten with the duration afterwards.
    pub fn write_manifest(
        &self,
        cfg: &Config,
        raw_config: &str,
        overrides: &[String],
        duration_seconds: Option<f64>,
    ) -> Result<(), CliError> {
        let manifest = Manifest {
            tool: "fedsim",
            version: env!("CARGO_PKG_VERSION"),
            seeds: vec![cfg.seed],
            output_dir: self.dir.display().to_string(),
            config_snapshot: raw_config,
            overrides,
            resolved_config: cfg
                .to_key_values()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            started_unix: self.started_unix,
            duration_seconds,
        };
        let body = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        self.write("manifest.json", &(body + "\n"))
    }

    /// One row per round: losses, weights, change rates, the divergence-bound
    /// pair, eval metrics on their cadence, and the raw direction norm.
    pub fn write_metrics(&self, cfg: &Config, records: &[RunRecord]) -> Result<(), CliError> {
        let k = cfg.clients;
        let mut out = String::new();
        out.push_str(METRICS_SCHEMA);
        out.push('\n');
        out.push_str("round,align,uniform");
        for i in 1..=k {
            out.push_str(&format!(",p{i}"));
        }
        for i in 1..=k {
            out.push_str(&format!(",c{i}"));
        }
        out.push_str(",lemma1_lhs,lemma1_rhs,knn,effective_rank,raw_norm\n");
        for rec in records {
            out.push_str(&format!("{},{},{}", rec.round, rec.align, rec.uniform));
            for v in &rec.weights {
                out.push_str(&format!(",{v}"));
            }
            for v in &rec.rates {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}", rec.lemma1_lhs, rec.lemma1_rhs));
            match &rec.eval {
                Some(e) => out.push_str(&format!(",{},{}", e.knn_accuracy, e.effective_rank)),
                None => out.push_str(",,"),
            }
            out.push_str(&format!(",{}\n", rec.raw_norm));
        }
        self.write("metrics.csv", &out)
    }

    /// Covariance spectra on eval rounds, for the global model and for every
    /// client model over the same test points.
    pub fn write_spectra(&self, cfg: &Config, records: &[RunRecord]) -> Result<(), CliError> {
        let d = cfg.embed_dim;
        let mut out = String::new();
        out.push_str(SPECTRA_SCHEMA);
        out.push('\n');
        out.push_str("round,scope,effective_rank");
        for i in 1..=d {
            out.push_str(&format!(",sv{i}"));
        }
        out.push('\n');
        for rec in records {
            let Some(eval) = &rec.eval else { continue };
            let mut push_row = |scope: &str, values: &[f64], rank: f64| {
                out.push_str(&format!("{},{scope},{rank}", rec.round));
                for v in values.iter().take(d) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            };
            push_row(
                "global",
                &eval.global_spectrum.singular_values,
                eval.global_spectrum.effective_rank,
            );
            for (k, spec) in eval.client_spectra.iter().enumerate() {
                push_row(&format!("client{k}"), &spec.singular_values, spec.effective_rank);
            }
        }
        self.write("spectra.csv", &out)
    }

    /// Final-round test embeddings under the global model: id, held-out
    /// label, then coordinates. Emitted so external tools can plot collapse.
    pub fn write_embeddings(&self, cfg: &Config, run: &RunOutput) -> Result<(), CliError> {
        let enc = Encoder::from_params(run.dims, run.final_global.clone());
        let test = run.dataset.test_indices();
        let features = run.dataset.features();
        let x = fedsim_core::numerics::Mat::from_fn(test.len(), features.cols(), |r, c| {
            features.get(test[r], c)
        });
        let z = enc
            .forward(&x)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let labels = run.dataset.labels_for(test);

        let mut out = String::new();
        out.push_str(EMBEDDINGS_SCHEMA);
        out.push('\n');
        out.push_str("id,label");
        for i in 1..=cfg.embed_dim {
            out.push_str(&format!(",z{i}"));
        }
        out.push('\n');
        for (row, (&idx, &label)) in test.iter().zip(&labels).enumerate() {
            out.push_str(&format!("{idx},{label}"));
            for c in 0..z.cols() {
                out.push_str(&format!(",{}", z.get(row, c)));
            }
            out.push('\n');
        }
        self.write("embeddings.csv", &out)
    }
}

/// Sweep summary: one row per cell with its final KNN accuracy and effective
/// rank; failed cells carry their error in the status column.
pub fn write_summary(out_dir: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(SUMMARY_SCHEMA);
    out.push('\n');
    out.push_str("seed,aggregator,lambda_u,status,final_knn,final_effective_rank\n");
    for row in rows {
        let cell = &row.cell;
        match &row.status {
            Ok(s) => {
                let knn = s.final_knn.map_or_else(String::new, |v| v.to_string());
                let rank = s.final_effective_rank.map_or_else(String::new, |v| v.to_string());
                out.push_str(&format!(
                    "{},{},{},ok,{},{}\n",
                    cell.seed,
                    cell.aggregator.as_str(),
                    cell.lambda_u,
                    knn,
                    rank
                ));
            }
            Err(e) => {
                let clean = e.replace(',', ";").replace('\n', " ");
                out.push_str(&format!(
                    "{},{},{},failed: {},,\n",
                    cell.seed,
                    cell.aggregator.as_str(),
                    cell.lambda_u,
                    clean
                ));
            }
        }
    }
    let path = out_dir.join("summary.csv");
    fs::write(&path, out).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
