//! Round orchestration: broadcast the global model, run local epochs on every
//! client, aggregate, and record diagnostics. A run is a pure function of its
//! config; clients may execute in parallel because each one owns an RNG
//! stream keyed by `(seed, client, round)` and results are collected in
//! client-id order before aggregation.

mod data;

pub use data::{dirichlet_partition, gaussian_unit_rows, make_dataset, ClientShard, SyntheticDataset};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::aggregator::{self, EuaSettings};
use crate::config::{Aggregator, AnchorMode, Config};
use crate::diagnostics::{self, SpectrumReport};
use crate::error::{Result, SimError};
use crate::numerics::{rng_domains, stream_key, Mat, RngStream};
use crate::ssl::{self, Encoder, EncoderDims, UotSettings};

/// What one client returns from its local epochs.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub params: Vec<f64>,
    /// Mean alignment loss over processed batches.
    pub mean_align: f64,
    /// Mean per-view uniformity loss over processed batches.
    pub mean_uniform: f64,
    /// Batches per epoch, for the divergence-bound step count.
    pub batches_per_epoch: usize,
}

/// Inputs a client needs besides the broadcast parameters. Note there is no
/// way to reach labels from here.
pub struct ClientContext<'a> {
    pub features: &'a Mat,
    pub shard: &'a ClientShard,
    pub dims: EncoderDims,
    /// Anchor rows shared by all clients in fixed-anchor mode.
    pub fixed_anchors: Option<&'a Mat>,
    pub round: usize,
}

fn gather_rows(features: &Mat, indices: &[usize]) -> Mat {
    Mat::from_fn(indices.len(), features.cols(), |r, c| features.get(indices[r], c))
}

/// Run `local_epochs` of shuffled minibatches from the broadcast parameters
/// and return the final local model. Deterministic under
/// `(cfg.seed, client, round)`.
pub fn client_execute(
    client: usize,
    theta_g: &[f64],
    ctx: &ClientContext<'_>,
    cfg: &Config,
) -> Result<ClientOutcome> {
    let stream = RngStream::new(
        cfg.seed,
        stream_key(&[rng_domains::CLIENT, client as u64, ctx.round as u64]),
    );
    let mut enc = Encoder::from_params(ctx.dims, theta_g.to_vec());
    let settings = UotSettings {
        tau_a: cfg.tau_a,
        tau_b: cfg.tau_b,
        max_iters: cfg.uot_max_iters,
        tol: cfg.uot_tol,
    };
    let batches_per_epoch = ctx.shard.indices.len().div_ceil(cfg.batch);

    let mut align_sum = 0.0;
    let mut uniform_sum = 0.0;
    let mut batch_count = 0usize;
    for epoch in 0..cfg.local_epochs {
        let mut order = ctx.shard.indices.clone();
        stream
            .substream(stream_key(&[epoch as u64, 0, 1]))
            .shuffle(&mut order);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let x = gather_rows(ctx.features, chunk);
            let tags = |purpose: u64| stream_key(&[epoch as u64, bi as u64, purpose]);
            let views = ssl::augment(
                &x,
                &stream.substream(tags(2)),
                cfg.noise_sigma,
                cfg.mask_prob,
            );
            let (anchors1, anchors2) = match ctx.fixed_anchors {
                Some(fixed) => (fixed.clone(), fixed.clone()),
                None => {
                    let mut a1 = stream.substream(tags(3));
                    let mut a2 = stream.substream(tags(4));
                    (
                        gaussian_unit_rows(&mut a1, chunk.len(), ctx.dims.output),
                        gaussian_unit_rows(&mut a2, chunk.len(), ctx.dims.output),
                    )
                }
            };
            let eval =
                ssl::total_loss_and_grad(&enc, &views, &anchors1, &anchors2, cfg.lambda_u, &settings)?;
            align_sum += eval.breakdown.align;
            uniform_sum += 0.5 * (eval.breakdown.uniform1 + eval.breakdown.uniform2);
            batch_count += 1;
            enc = ssl::sgd_step(&enc, &eval.grad, cfg.lr, cfg.clip)?;
        }
    }

    let denom = batch_count.max(1) as f64;
    Ok(ClientOutcome {
        params: enc.params,
        mean_align: align_sum / denom,
        mean_uniform: uniform_sum / denom,
        batches_per_epoch,
    })
}

/// Evaluation block computed on the configured cadence.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub knn_accuracy: f64,
    pub knn_k: usize,
    pub effective_rank: f64,
    /// Mean pairwise squared distance of global test embeddings.
    pub uniformity: f64,
    /// Alignment loss of the global model on augmented test views.
    pub alignment_gap: f64,
    pub global_spectrum: SpectrumReport,
    /// One spectrum per client model, over the same test points.
    pub client_spectra: Vec<SpectrumReport>,
}

/// Per-round metrics for persistence.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub round: usize,
    pub align: f64,
    pub uniform: f64,
    /// Aggregation weights used this round (sample ratios for FedAvg).
    pub weights: Vec<f64>,
    /// First-order deviation change rates; zero for FedAvg rounds.
    pub rates: Vec<f64>,
    pub lemma1_lhs: f64,
    pub lemma1_rhs: f64,
    /// False when the bound is vacuous (fewer than 2 local steps).
    pub lemma1_checked: bool,
    /// Pre-normalization norm of the balanced direction; zero for FedAvg.
    pub raw_norm: f64,
    pub eval: Option<EvalRecord>,
}

/// Everything a finished run hands back to callers.
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub final_global: Vec<f64>,
    pub dims: EncoderDims,
    pub dataset: SyntheticDataset,
}

pub fn run(cfg: &Config) -> Result<RunOutput> {
    run_with_jobs(cfg, 1)
}

/// Like [`run`] but executing up to `jobs` clients concurrently; outputs are
/// identical for any job count.
pub fn run_with_jobs(cfg: &Config, jobs: usize) -> Result<RunOutput> {
    cfg.validate()
        .map_err(|e| SimError::Invariant(e.to_string()))?;

    let mut data_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::DATASET]));
    let dataset = make_dataset(&mut data_rng, cfg.num_classes, cfg.per_class, cfg.dim, cfg.spread);
    let mut part_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::PARTITION]));
    let shards = dirichlet_partition(&dataset, cfg.clients, cfg.alpha, &mut part_rng);
    verify_partition(&dataset, &shards)?;

    let dims = EncoderDims { input: cfg.dim, hidden: cfg.hidden, output: cfg.embed_dim };
    let mut init_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::INIT]));
    let mut theta_g = Encoder::init(dims, &mut init_rng).params;

    let fixed_anchors = match cfg.anchors {
        AnchorMode::Fixed => {
            let mut rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::ANCHORS]));
            Some(gaussian_unit_rows(&mut rng, cfg.batch, cfg.embed_dim))
        }
        AnchorMode::Fresh => None,
    };

    let sample_counts: Vec<usize> = shards.iter().map(|s| s.indices.len()).collect();
    let total_samples: f64 = sample_counts.iter().map(|&c| c as f64).sum();

    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let label_reads_before = dataset.label_read_count();

        let outcomes: Vec<Result<ClientOutcome>> =
            parallel_map_indexed(cfg.clients, jobs, |k| {
                let ctx = ClientContext {
                    features: dataset.features(),
                    shard: &shards[k],
                    dims,
                    fixed_anchors: fixed_anchors.as_ref(),
                    round,
                };
                client_execute(k, &theta_g, &ctx, cfg)
            });
        let mut client_params = Vec::with_capacity(cfg.clients);
        let mut align = 0.0;
        let mut uniform = 0.0;
        let mut max_steps = 0usize;
        for (k, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome.map_err(|e| e.in_round(round, Some(k)))?;
            align += outcome.mean_align / cfg.clients as f64;
            uniform += outcome.mean_uniform / cfg.clients as f64;
            max_steps = max_steps.max(cfg.local_epochs * outcome.batches_per_epoch);
            client_params.push(outcome.params);
        }

        if dataset.label_read_count() != label_reads_before {
            return Err(SimError::Invariant(
                "labels were read during client training".into(),
            ));
        }

        // aggregate
        let (new_global, weights, rates, raw_norm) = match cfg.aggregator {
            Aggregator::FedAvg => {
                let new_global = aggregator::fedavg(&client_params, &sample_counts)
                    .map_err(|e| e.in_round(round, None))?;
                let p: Vec<f64> = sample_counts
                    .iter()
                    .map(|&c| c as f64 / total_samples)
                    .collect();
                (new_global, p, vec![0.0; cfg.clients], 0.0)
            }
            Aggregator::Eua => {
                let settings = EuaSettings {
                    eta_g: cfg.eta_g,
                    phi: cfg.phi,
                    rho: cfg.rho,
                    eta_global: cfg.eta_global,
                    admm_max_iters: cfg.admm_max_iters,
                    admm_tol: cfg.admm_tol,
                    dev_eps: cfg.dev_eps,
                    base: cfg.eua_base,
                };
                let out = aggregator::eua_aggregate(&theta_g, &client_params, &sample_counts, &settings)
                    .map_err(|e| e.in_round(round, None))?;
                (out.new_global, out.weights.p, out.rates, out.direction.raw_norm)
            }
        };

        // divergence bound against the broadcast model; vacuous below 2 steps
        let (lemma1_lhs, lemma1_rhs, lemma1_ok) = diagnostics::lemma1_check(
            &weights,
            &theta_g,
            &client_params,
            cfg.lr,
            max_steps,
            cfg.clip,
        );
        let lemma1_checked = max_steps >= 2;
        if lemma1_checked && !lemma1_ok {
            return Err(SimError::Invariant(format!(
                "client divergence bound violated in round {round}: {lemma1_lhs} > {lemma1_rhs}"
            )));
        }

        theta_g = new_global;

        let eval = if (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds {
            Some(evaluate(cfg, &dataset, dims, &theta_g, &client_params, round)
                .map_err(|e| e.in_round(round, None))?)
        } else {
            None
        };

        records.push(RunRecord {
            round,
            align,
            uniform,
            weights,
            rates,
            lemma1_lhs,
            lemma1_rhs,
            lemma1_checked,
            raw_norm,
            eval,
        });
    }

    Ok(RunOutput { records, final_global: theta_g, dims, dataset })
}

fn evaluate(
    cfg: &Config,
    dataset: &SyntheticDataset,
    dims: EncoderDims,
    theta_g: &[f64],
    client_params: &[Vec<f64>],
    round: usize,
) -> Result<EvalRecord> {
    let enc = Encoder::from_params(dims, theta_g.to_vec());
    let train_x = gather_rows(dataset.features(), dataset.train_indices());
    let test_x = gather_rows(dataset.features(), dataset.test_indices());
    let train_z = enc.forward(&train_x)?;
    let test_z = enc.forward(&test_x)?;

    let knn_k = cfg.knn_k.min(train_z.rows());
    let knn_accuracy = diagnostics::knn_eval(
        &train_z,
        &dataset.labels_for(dataset.train_indices()),
        &test_z,
        &dataset.labels_for(dataset.test_indices()),
        knn_k,
    )?;

    let global_spectrum = diagnostics::covariance_spectrum(&test_z)?;
    let mut client_spectra = Vec::with_capacity(client_params.len());
    for params in client_params {
        let client_enc = Encoder::from_params(dims, params.clone());
        let z = client_enc.forward(&test_x)?;
        client_spectra.push(diagnostics::covariance_spectrum(&z)?);
    }

    let uniformity = diagnostics::mean_pairwise_sq_dist(&test_z);
    let eval_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::EVAL, round as u64]));
    let views = ssl::augment(&test_x, &eval_rng, cfg.noise_sigma, cfg.mask_prob);
    let alignment_gap = ssl::align_loss(&enc.forward(&views.x1)?, &enc.forward(&views.x2)?)?;

    Ok(EvalRecord {
        knn_accuracy,
        knn_k,
        effective_rank: global_spectrum.effective_rank,
        uniformity,
        alignment_gap,
        global_spectrum,
        client_spectra,
    })
}

fn verify_partition(ds: &SyntheticDataset, shards: &[ClientShard]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for shard in shards {
        if shard.indices.is_empty() {
            return Err(SimError::Invariant(format!(
                "client {} received an empty shard",
                shard.client_id
            )));
        }
        for &i in &shard.indices {
            if !seen.insert(i) {
                return Err(SimError::Invariant(format!("index {i} assigned twice")));
            }
        }
    }
    let train: std::collections::BTreeSet<usize> = ds.train_indices().iter().copied().collect();
    if seen != train {
        return Err(SimError::Invariant("shards do not cover the training split".into()));
    }
    Ok(())
}

/// Apply `f` to `0..n`, running up to `jobs` invocations concurrently;
/// results come back in index order regardless of scheduling.
pub fn parallel_map_indexed<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.min(n);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                *slots[i].lock().expect("result slot") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("worker filled slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EuaBase;

    fn smoke_config() -> Config {
        Config {
            seed: 3,
            clients: 3,
            num_classes: 3,
            per_class: 20,
            dim: 6,
            hidden: 8,
            embed_dim: 4,
            batch: 8,
            local_epochs: 1,
            rounds: 3,
            eval_every: 2,
            ..Config::default()
        }
    }

    #[test]
    fn zero_rounds_returns_initial_model() {
        let cfg = Config { rounds: 0, ..smoke_config() };
        let out = run(&cfg).unwrap();
        assert!(out.records.is_empty());
        let mut init_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::INIT]));
        let init = Encoder::init(out.dims, &mut init_rng).params;
        assert_eq!(out.final_global, init);
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_params_unchanged() {
        let cfg = smoke_config();
        let mut data_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::DATASET]));
        let ds = make_dataset(&mut data_rng, cfg.num_classes, cfg.per_class, cfg.dim, cfg.spread);
        let mut part_rng = RngStream::new(cfg.seed, stream_key(&[rng_domains::PARTITION]));
        let shards = dirichlet_partition(&ds, cfg.clients, cfg.alpha, &mut part_rng);
        let dims = EncoderDims { input: cfg.dim, hidden: cfg.hidden, output: cfg.embed_dim };
        let theta: Vec<f64> = (0..dims.param_len()).map(|i| i as f64 * 0.01).collect();
        let ctx = ClientContext {
            features: ds.features(),
            shard: &shards[0],
            dims,
            fixed_anchors: None,
            round: 0,
        };

        let no_epochs = Config { local_epochs: 0, ..cfg.clone() };
        let out = client_execute(0, &theta, &ctx, &no_epochs).unwrap();
        assert_eq!(out.params, theta);

        let no_lr = Config { lr: 0.0, ..cfg.clone() };
        let out = client_execute(0, &theta, &ctx, &no_lr).unwrap();
        assert_eq!(out.params, theta);

        let twice_a = client_execute(0, &theta, &ctx, &cfg).unwrap();
        let twice_b = client_execute(0, &theta, &ctx, &cfg).unwrap();
        assert_eq!(twice_a.params, twice_b.params);
    }

    #[test]
    fn run_is_deterministic_and_parallel_invariant() {
        let cfg = smoke_config();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        let c = run_with_jobs(&cfg, 3).unwrap();
        assert_eq!(a.final_global, b.final_global);
        assert_eq!(a.final_global, c.final_global);
        assert_eq!(a.records.len(), 3);
        for (ra, rc) in a.records.iter().zip(&c.records) {
            assert_eq!(ra.weights, rc.weights);
            assert_eq!(ra.align, rc.align);
        }
    }

    #[test]
    fn lemma_bound_holds_each_round() {
        let cfg = Config { rounds: 5, ..smoke_config() };
        let out = run(&cfg).unwrap();
        for rec in &out.records {
            assert!(rec.lemma1_checked);
            assert!(rec.lemma1_lhs <= rec.lemma1_rhs);
        }
    }

    #[test]
    fn no_label_reads_during_training_rounds() {
        // eval_every beyond the horizon: the only label reads would be from
        // training, and there must be none (final round still evaluates)
        let cfg = Config { rounds: 2, eval_every: 100, ..smoke_config() };
        let out = run(&cfg).unwrap();
        // exactly one eval (the final round) consumed labels
        let evals: Vec<_> = out.records.iter().filter(|r| r.eval.is_some()).collect();
        assert_eq!(evals.len(), 1);
    }

    #[test]
    fn single_client_eua_with_fedavg_base_follows_the_client() {
        let base = Config {
            clients: 1,
            num_classes: 2,
            per_class: 10,
            rounds: 4,
            local_epochs: 1,
            batch: 4,
            ..smoke_config()
        };
        let favg = Config { aggregator: Aggregator::FedAvg, ..base.clone() };
        let eua = Config {
            aggregator: Aggregator::Eua,
            eua_base: EuaBase::FedAvg,
            ..base
        };
        let a = run(&favg).unwrap();
        let b = run(&eua).unwrap();
        for (x, y) in a.final_global.iter().zip(&b.final_global) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
        // the lone client holds all mass
        for rec in &b.records {
            assert_eq!(rec.weights, vec![1.0]);
        }
    }

    #[test]
    fn parallel_map_preserves_order() {
        let out = parallel_map_indexed(17, 4, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }
}
