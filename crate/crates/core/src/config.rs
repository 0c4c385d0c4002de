//! Run configuration: a small `key = value` text format plus validation.
//!
//! The parser is total: any byte sequence either produces a `Config` or a
//! `ConfigError` naming the offending key — it never panics. Unknown keys are
//! rejected, duplicate keys follow last-write-wins, `#` starts a comment.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    FedAvg,
    Eua,
}

impl Aggregator {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::Eua => "eua",
        }
    }
}

/// Whether anchor samples are drawn once per run or fresh per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    Fixed,
    Fresh,
}

impl AnchorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorMode::Fixed => "fixed",
            AnchorMode::Fresh => "fresh",
        }
    }
}

/// Base point for the balanced server update: the previous global model
/// (deviation descent only) or the sample-weighted client mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EuaBase {
    Keep,
    FedAvg,
}

impl EuaBase {
    pub fn as_str(self) -> &'static str {
        match self {
            EuaBase::Keep => "keep",
            EuaBase::FedAvg => "fedavg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Number of clients (config key `K`).
    pub clients: usize,
    /// Dirichlet concentration for the non-IID partition.
    pub alpha: f64,
    pub num_classes: usize,
    pub per_class: usize,
    /// Feature dimension of the synthetic dataset.
    pub dim: usize,
    /// Scale of the class centers; 0 makes classes indistinguishable.
    pub spread: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub batch: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub lr: f64,
    pub clip: f64,
    pub lambda_u: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub phi: f64,
    pub rho: f64,
    pub aggregator: Aggregator,
    /// Direction scale of the balanced update (numerator of eta_g/phi).
    pub eta_g: f64,
    /// Server step size applied along the balanced direction.
    pub eta_global: f64,
    pub eua_base: EuaBase,
    pub anchors: AnchorMode,
    pub eval_every: usize,
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub knn_k: usize,
    pub uot_max_iters: usize,
    pub uot_tol: f64,
    pub admm_max_iters: usize,
    pub admm_tol: f64,
    /// Floor added to squared deviations before taking logs.
    pub dev_eps: f64,
    /// Fraction of clients participating per round; only 1.0 is supported.
    pub participation: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            clients: 4,
            alpha: 0.1,
            num_classes: 4,
            per_class: 64,
            dim: 8,
            spread: 3.0,
            hidden: 16,
            embed_dim: 8,
            batch: 32,
            local_epochs: 2,
            rounds: 20,
            lr: 0.05,
            clip: 5.0,
            lambda_u: 0.1,
            tau_a: 0.8,
            tau_b: 0.8,
            phi: 0.1,
            rho: 1.0,
            aggregator: Aggregator::Eua,
            eta_g: 1.0,
            eta_global: 0.1,
            eua_base: EuaBase::Keep,
            anchors: AnchorMode::Fresh,
            eval_every: 5,
            noise_sigma: 0.1,
            mask_prob: 0.1,
            knn_k: 5,
            uot_max_iters: 500,
            uot_tol: 1e-8,
            admm_max_iters: 1000,
            admm_tol: 1e-8,
            dev_eps: 1e-12,
            participation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl Config {
    /// Parse a config file body on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for raw_line in text.lines() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(line, "expected `key = value`"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` override (the CLI's repeated `--set` flag).
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError::new(pair, "override must be `key=value`"))?;
        self.set(key.trim(), value.trim())
    }

    /// Validate cross-field constraints; `set` already validates per-key ones.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.participation != 1.0 {
            return Err(ConfigError::new(
                "participation",
                "partial participation is not supported; must be 1",
            ));
        }
        let train_total: usize = (0..self.num_classes)
            .map(|_| self.per_class - self.per_class / 5)
            .sum();
        if train_total < self.clients {
            return Err(ConfigError::new(
                "K",
                format!(
                    "more clients ({}) than training samples ({train_total})",
                    self.clients
                ),
            ));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
            v.parse::<T>()
                .map_err(|_| ConfigError::new(key, format!("cannot parse `{v}`")))
        }
        fn finite(key: &str, v: f64) -> Result<f64, ConfigError> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ConfigError::new(key, "must be finite"))
            }
        }
        fn require(key: &str, ok: bool, msg: &str) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::new(key, msg))
            }
        }

        match key {
            "seed" => self.seed = num(key, value)?,
            "K" | "clients" => {
                self.clients = num(key, value)?;
                require(key, self.clients >= 1, "need at least 1 client")?;
            }
            "alpha" => {
                self.alpha = finite(key, num(key, value)?)?;
                require(key, self.alpha > 0.0, "must be > 0")?;
            }
            "num_classes" => {
                self.num_classes = num(key, value)?;
                require(key, self.num_classes >= 2, "need at least 2 classes")?;
            }
            "per_class" => {
                self.per_class = num(key, value)?;
                require(key, self.per_class >= 4, "need at least 4 samples per class")?;
            }
            "dim" => {
                self.dim = num(key, value)?;
                require(key, self.dim >= 2, "need at least 2 features")?;
            }
            "spread" => {
                self.spread = finite(key, num(key, value)?)?;
                require(key, self.spread >= 0.0, "must be >= 0")?;
            }
            "hidden" => {
                self.hidden = num(key, value)?;
                require(key, self.hidden >= 1, "must be >= 1")?;
            }
            "embed_dim" => {
                self.embed_dim = num(key, value)?;
                require(key, self.embed_dim >= 1, "must be >= 1")?;
            }
            "batch" => {
                self.batch = num(key, value)?;
                require(key, self.batch >= 1, "must be >= 1")?;
            }
            "local_epochs" => self.local_epochs = num(key, value)?,
            "rounds" => self.rounds = num(key, value)?,
            "lr" => {
                self.lr = finite(key, num(key, value)?)?;
                require(key, self.lr >= 0.0, "must be >= 0")?;
            }
            "clip" => {
                self.clip = finite(key, num(key, value)?)?;
                require(key, self.clip > 0.0, "must be > 0")?;
            }
            "lambda_u" => {
                self.lambda_u = finite(key, num(key, value)?)?;
                require(key, self.lambda_u >= 0.0, "must be >= 0")?;
            }
            "tau_a" => {
                self.tau_a = finite(key, num(key, value)?)?;
                require(key, self.tau_a >= 0.0, "must be >= 0")?;
            }
            "tau_b" => {
                self.tau_b = finite(key, num(key, value)?)?;
                require(key, self.tau_b >= 0.0, "must be >= 0")?;
            }
            "phi" => {
                self.phi = finite(key, num(key, value)?)?;
                require(key, self.phi > 0.0, "must be > 0")?;
            }
            "rho" => {
                self.rho = finite(key, num(key, value)?)?;
                require(key, self.rho > 0.0, "must be > 0")?;
            }
            "aggregator" => {
                self.aggregator = match value {
                    "fedavg" => Aggregator::FedAvg,
                    "eua" => Aggregator::Eua,
                    other => {
                        return Err(ConfigError::new(
                            key,
                            format!("unknown aggregator `{other}` (fedavg|eua)"),
                        ))
                    }
                }
            }
            "eta_g" => {
                self.eta_g = finite(key, num(key, value)?)?;
                require(key, self.eta_g > 0.0, "must be > 0")?;
            }
            "eta_global" => {
                self.eta_global = finite(key, num(key, value)?)?;
                require(key, self.eta_global >= 0.0, "must be >= 0")?;
            }
            "eua_base" => {
                self.eua_base = match value {
                    "keep" => EuaBase::Keep,
                    "fedavg" => EuaBase::FedAvg,
                    other => {
                        return Err(ConfigError::new(
                            key,
                            format!("unknown base `{other}` (keep|fedavg)"),
                        ))
                    }
                }
            }
            "anchors" => {
                self.anchors = match value {
                    "fixed" => AnchorMode::Fixed,
                    "fresh" => AnchorMode::Fresh,
                    other => {
                        return Err(ConfigError::new(
                            key,
                            format!("unknown anchor mode `{other}` (fixed|fresh)"),
                        ))
                    }
                }
            }
            "eval_every" => {
                self.eval_every = num(key, value)?;
                require(key, self.eval_every >= 1, "must be >= 1")?;
            }
            "noise_sigma" => {
                self.noise_sigma = finite(key, num(key, value)?)?;
                require(key, self.noise_sigma >= 0.0, "must be >= 0")?;
            }
            "mask_prob" => {
                self.mask_prob = finite(key, num(key, value)?)?;
                require(key, (0.0..1.0).contains(&self.mask_prob), "must be in [0, 1)")?;
            }
            "knn_k" => {
                self.knn_k = num(key, value)?;
                require(key, self.knn_k >= 1, "must be >= 1")?;
            }
            "uot_max_iters" => {
                self.uot_max_iters = num(key, value)?;
                require(key, self.uot_max_iters >= 1, "must be >= 1")?;
            }
            "uot_tol" => {
                self.uot_tol = finite(key, num(key, value)?)?;
                require(key, self.uot_tol > 0.0, "must be > 0")?;
            }
            "admm_max_iters" => {
                self.admm_max_iters = num(key, value)?;
                require(key, self.admm_max_iters >= 1, "must be >= 1")?;
            }
            "admm_tol" => {
                self.admm_tol = finite(key, num(key, value)?)?;
                require(key, self.admm_tol > 0.0, "must be > 0")?;
            }
            "dev_eps" => {
                self.dev_eps = finite(key, num(key, value)?)?;
                require(key, self.dev_eps > 0.0, "must be > 0")?;
            }
            "participation" => {
                self.participation = finite(key, num(key, value)?)?;
                require(
                    key,
                    self.participation == 1.0,
                    "partial participation is not supported; must be 1",
                )?;
            }
            other => return Err(ConfigError::new(other, "unknown key")),
        }
        Ok(())
    }

    /// Canonical `(key, value)` listing of the resolved configuration, in a
    /// stable order; used for manifests and logs.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("K", self.clients.to_string()),
            ("alpha", self.alpha.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("dim", self.dim.to_string()),
            ("spread", self.spread.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("batch", self.batch.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("rounds", self.rounds.to_string()),
            ("lr", self.lr.to_string()),
            ("clip", self.clip.to_string()),
            ("lambda_u", self.lambda_u.to_string()),
            ("tau_a", self.tau_a.to_string()),
            ("tau_b", self.tau_b.to_string()),
            ("phi", self.phi.to_string()),
            ("rho", self.rho.to_string()),
            ("aggregator", self.aggregator.as_str().to_string()),
            ("eta_g", self.eta_g.to_string()),
            ("eta_global", self.eta_global.to_string()),
            ("eua_base", self.eua_base.as_str().to_string()),
            ("anchors", self.anchors.as_str().to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("mask_prob", self.mask_prob.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("uot_max_iters", self.uot_max_iters.to_string()),
            ("uot_tol", self.uot_tol.to_string()),
            ("admm_max_iters", self.admm_max_iters.to_string()),
            ("admm_tol", self.admm_tol.to_string()),
            ("dev_eps", self.dev_eps.to_string()),
            ("participation", self.participation.to_string()),
        ]
    }
}
