//! Flat key-value experiment configuration.
//!
//! File format: one `key = value` per line, `#` starts a comment. Values
//! from `--set key=value` and the global flags override the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nsad_core::montecarlo::{SweepDimension, TauSource};
use nsad_core::network::{LeNetOptions, NetworkSpec, PoolKind};
use nsad_core::nonsmooth::{NonsmoothPolicy, PoolMode};
use nsad_core::precision::Precision;
use nsad_core::rng;
use nsad_core::training::Optimizer;
use nsad_core::zero::ZeroVariant;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`; valid keys: {}", valid_keys().join(", "))]
    UnknownKey { key: String },
    #[error("invalid value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `(key, default, description)`. The order here is the order used when a
/// config is written back out.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("precision", "32", "working format: 16, 32 or 64"),
    ("seed", "0", "root seed; every other seed is derived from it"),
    ("out", "out", "output directory"),
    ("threads", "0", "worker threads for Monte Carlo draws (0 = all cores)"),
    ("data_dir", "", "MNIST IDX directory (default: NSAD_DATA_DIR, then data/mnist)"),
    ("network", "lenet", "lenet or mlp"),
    ("batchnorm", "false", "batch normalization after each convolution"),
    ("pool", "max", "pooling layer: max or norm"),
    ("hidden_layers", "0", "extra 84-wide hidden layers in the LeNet head"),
    ("mlp_hidden", "128", "comma-separated hidden widths for network = mlp"),
    ("train_size", "2048", "stratified training subset size (0 = all)"),
    ("test_size", "0", "stratified test subset size (0 = all)"),
    ("batch_size", "128", "mini-batch size"),
    ("draws", "100", "Monte Carlo parameter draws M"),
    ("variant", "max", "zero program: max or relu-built"),
    ("x", "1,2,3,4", "zero program input vector"),
    ("t", "-1e-3,-1e-2,-1e-1,0,10,100,1000", "zero program evaluation points"),
    ("policy_p", "native", "program P: pool mode [+relu:s], e.g. native, hybrid:0.5+relu:1"),
    ("policy_q", "minimal", "program Q, same syntax as policy_p"),
    ("order", "sequential", "reduction order for P and Q: sequential or shuffled"),
    ("tau", "tau1", "zone threshold: tau1, tau2, a number, or inf"),
    ("tau1_shuffle", "true", "tau1 compares shuffled runs (false: sequential, gives 0)"),
    ("tau1_repeats", "1", "shuffled repeats per record for tau1"),
    ("risk", "0.05", "confidence risk level for the margins"),
    ("bins_per_decade", "2", "histogram resolution"),
    ("sweep", "", "zone-volume sweep, e.g. batch-size:32,64,128 | depth:0,1,2 | batchnorm:0,1"),
    ("epochs", "20", "training epochs"),
    ("optimizer", "sgd", "sgd or adam"),
    ("gamma", "0.01", "step size"),
    ("alpha", "1", "per-batch learning rate (SGD factor is gamma*alpha/|B|)"),
    ("betas", "0,1,10,10000", "beta list for weight-divergence and beta-sweep"),
    ("precisions", "16,32", "precision list for beta-sweep"),
    ("batchnorm_grid", "false,true", "batchnorm settings for beta-sweep"),
    ("strict_b16", "false", "keep optimizer state in binary16 when training at 16 bits"),
];

pub fn valid_keys() -> Vec<&'static str> {
    KEYS.iter().map(|k| k.0).collect()
}

/// Raw key-value pairs after merging file and overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RawConfig(pub BTreeMap<String, String>);

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim();
        if !KEYS.iter().any(|k| k.0 == key) {
            return Err(ConfigError::UnknownKey { key: key.to_string() });
        }
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn parse_str(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.parse_str(&text, &path.display().to_string())
    }

    /// `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax {
            path: "--set".into(),
            line: 1,
        })?;
        self.set(k, v)
    }

    fn get(&self, key: &str) -> &str {
        self.0
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| KEYS.iter().find(|k| k.0 == key).map(|k| k.1).expect("known key"))
    }
}

fn bad(key: &str, value: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        msg: msg.to_string(),
    }
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(key);
    v.parse::<T>().map_err(|e| bad(key, v, e))
}

fn parse_list<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(key);
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| bad(key, v, e)))
        .collect()
}

fn parse_bool(raw: &RawConfig, key: &str) -> Result<bool, ConfigError> {
    let v = raw.get(key);
    parse_bool_str(v).ok_or_else(|| bad(key, v, "expected true/false"))
}

fn parse_bool_str(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Some(true),
        "false" | "0" | "off" | "no" => Some(false),
        _ => None,
    }
}

/// `<pool mode>[+relu:<s>]`.
pub fn parse_policy(s: &str) -> Result<NonsmoothPolicy, String> {
    let mut policy = NonsmoothPolicy::native();
    for part in s.split('+').map(str::trim) {
        if let Some(slope) = part.strip_prefix("relu:") {
            let v: f64 = slope.parse().map_err(|e| format!("relu slope: {e}"))?;
            policy = policy.with_relu_s(v).map_err(|e| e.to_string())?;
        } else {
            let mode: PoolMode = part.parse().map_err(|e: nsad_core::nonsmooth::PolicyError| e.to_string())?;
            policy = policy.with_pool_mode(mode).map_err(|e| e.to_string())?;
        }
    }
    Ok(policy)
}

fn parse_tau(v: &str, seed: u64, shuffle: bool, repeats: usize) -> Result<TauSource, String> {
    match v.trim().to_ascii_lowercase().as_str() {
        "tau1" => Ok(TauSource::Tau1 {
            shuffle_seed: shuffle.then(|| rng::derive_seed(seed, "tau1", 0)),
            repeats,
        }),
        "tau2" => Ok(TauSource::Tau2),
        "inf" | "+inf" | "infinity" => Ok(TauSource::Explicit(f64::INFINITY)),
        other => {
            let t: f64 = other.parse().map_err(|_| "expected tau1, tau2, a number or inf".to_string())?;
            if t.is_nan() || t < 0.0 {
                return Err("threshold must be non-negative".into());
            }
            Ok(TauSource::Explicit(t))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum NetworkChoice {
    LeNet(LeNetOptions),
    Mlp(Vec<usize>),
}

/// Typed configuration; every field is validated on construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub data_dir: Option<PathBuf>,
    pub network: NetworkChoice,
    pub train_size: usize,
    pub test_size: usize,
    pub batch_size: usize,
    pub draws: usize,
    pub variant: ZeroVariant,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub policy_p: NonsmoothPolicy,
    pub policy_q: NonsmoothPolicy,
    pub shuffled: bool,
    pub tau: TauSource,
    pub tau1_shuffle: bool,
    pub tau1_repeats: usize,
    pub risk: f64,
    pub bins_per_decade: u32,
    pub sweep: Option<(SweepDimension, Vec<usize>)>,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub gamma: f64,
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub precisions: Vec<Precision>,
    pub batchnorm_grid: Vec<bool>,
    pub strict_b16: bool,
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let seed: u64 = parse(raw, "seed")?;
        let threads = match parse::<usize>(raw, "threads")? {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        };
        let data_dir = Some(raw.get("data_dir")).filter(|s| !s.is_empty()).map(PathBuf::from);
        let pool = match raw.get("pool") {
            "max" => PoolKind::Max,
            "norm" => PoolKind::Norm,
            v => return Err(bad("pool", v, "expected max or norm")),
        };
        let network = match raw.get("network") {
            "lenet" => NetworkChoice::LeNet(LeNetOptions {
                batchnorm: parse_bool(raw, "batchnorm")?,
                pool,
                extra_hidden: parse(raw, "hidden_layers")?,
            }),
            "mlp" => NetworkChoice::Mlp(parse_list(raw, "mlp_hidden")?),
            v => return Err(bad("network", v, "expected lenet or mlp")),
        };
        let policy = |key: &str| parse_policy(raw.get(key)).map_err(|e| bad(key, raw.get(key), e));
        let shuffled = match raw.get("order") {
            "sequential" => false,
            "shuffled" => true,
            v => return Err(bad("order", v, "expected sequential or shuffled")),
        };
        let tau1_shuffle = parse_bool(raw, "tau1_shuffle")?;
        let tau1_repeats: usize = parse(raw, "tau1_repeats")?;
        let tau = parse_tau(raw.get("tau"), seed, tau1_shuffle, tau1_repeats).map_err(|e| bad("tau", raw.get("tau"), e))?;
        let sweep = match raw.get("sweep") {
            "" => None,
            v => {
                let (dim, values) = v.split_once(':').ok_or_else(|| bad("sweep", v, "expected dimension:v1,v2,..."))?;
                let dim = match dim {
                    "batch-size" => SweepDimension::BatchSize,
                    "depth" => SweepDimension::Depth,
                    "batchnorm" => SweepDimension::BatchNorm,
                    _ => return Err(bad("sweep", v, "dimension must be batch-size, depth or batchnorm")),
                };
                let values = values
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|e| bad("sweep", v, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                Some((dim, values))
            }
        };
        let optimizer = match raw.get("optimizer") {
            "sgd" => Optimizer::Sgd,
            "adam" => Optimizer::adam(),
            v => return Err(bad("optimizer", v, "expected sgd or adam")),
        };
        let batchnorm_grid = raw
            .get("batchnorm_grid")
            .split(',')
            .map(|s| parse_bool_str(s).ok_or_else(|| bad("batchnorm_grid", raw.get("batchnorm_grid"), "expected booleans")))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = ExperimentConfig {
            precision: parse(raw, "precision")?,
            seed,
            out: PathBuf::from(raw.get("out")),
            threads,
            data_dir,
            network,
            train_size: parse(raw, "train_size")?,
            test_size: parse(raw, "test_size")?,
            batch_size: parse(raw, "batch_size")?,
            draws: parse(raw, "draws")?,
            variant: parse(raw, "variant")?,
            x: parse_list(raw, "x")?,
            t: parse_list(raw, "t")?,
            policy_p: policy("policy_p")?,
            policy_q: policy("policy_q")?,
            shuffled,
            tau,
            tau1_shuffle,
            tau1_repeats,
            risk: parse(raw, "risk")?,
            bins_per_decade: parse(raw, "bins_per_decade")?,
            sweep,
            epochs: parse(raw, "epochs")?,
            optimizer,
            gamma: parse(raw, "gamma")?,
            alpha: parse(raw, "alpha")?,
            betas: parse_list(raw, "betas")?,
            precisions: parse_list(raw, "precisions")?,
            batchnorm_grid,
            strict_b16: parse_bool(raw, "strict_b16")?,
        };
        cfg.check(raw)?;
        Ok(cfg)
    }

    fn check(&self, raw: &RawConfig) -> Result<(), ConfigError> {
        let positive = |key: &str, ok: bool| if ok { Ok(()) } else { Err(bad(key, raw.get(key), "must be positive")) };
        positive("batch_size", self.batch_size > 0)?;
        positive("draws", self.draws > 0)?;
        positive("gamma", self.gamma > 0.0)?;
        positive("alpha", self.alpha > 0.0)?;
        positive("bins_per_decade", self.bins_per_decade > 0)?;
        positive("tau1_repeats", self.tau1_repeats > 0)?;
        if !(self.risk > 0.0 && self.risk < 1.0) {
            return Err(bad("risk", raw.get("risk"), "must lie in (0, 1)"));
        }
        if self.betas.is_empty() {
            return Err(bad("betas", raw.get("betas"), "needs at least one value"));
        }
        Ok(())
    }

    pub fn spec(&self) -> NetworkSpec {
        match &self.network {
            NetworkChoice::LeNet(o) => NetworkSpec::lenet(*o),
            NetworkChoice::Mlp(h) => NetworkSpec::mlp(h),
        }
    }
}

/// The merged config as a reloadable key-value file, every key explicit.
pub fn render(raw: &RawConfig) -> String {
    let mut s = String::new();
    for (key, _, help) in KEYS {
        let _ = writeln!(s, "# {help}\n{key} = {}", raw.get(key));
    }
    s
}

/// The config as a JSON object with every key explicit.
pub fn to_json(raw: &RawConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> =
        KEYS.iter().map(|(k, _, _)| (k.to_string(), serde_json::Value::String(raw.get(k).to_string()))).collect();
    serde_json::Value::Object(map)
}
