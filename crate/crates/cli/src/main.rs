//! `nsad`: experiment driver for auditing nonsmooth automatic differentiation.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use nsad_core::data::{DataError, DATA_DIR_ENV};
use nsad_core::network::NetworkError;
use nsad_core::training::TrainError;

use config::{ConfigError, ExperimentConfig, RawConfig};
use output::{Artifacts, Manifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(
        "{source}\n\nMNIST could not be loaded from {}. Place train-images-idx3-ubyte.gz, \
         train-labels-idx1-ubyte.gz, t10k-images-idx3-ubyte.gz and t10k-labels-idx1-ubyte.gz \
         (gzipped or raw) in that directory, or point --data-dir or {DATA_DIR_ENV} at a copy. \
         The full set is mirrored at https://ossci-datasets.s3.amazonaws.com/mnist/; \
         scripts/make_mnist_subset.py rebuilds the small bundled subset.",
        dir.display()
    )]
    Data { dir: PathBuf, source: DataError },
    #[error("{0}")]
    Run(String),
    #[error("{0}")]
    Io(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Network(n) => n.into(),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data { .. } => 3,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

const EXIT_DIVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "nsad", version, about = "Backprop variation, bifurcation zones and hybrid-MaxPool training experiments")]
struct Cli {
    /// Working format: 16, 32 or 64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (artifacts go to <out>/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// MNIST IDX directory.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Override a config key, e.g. `--set draws=50`. Repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Derivative of the null program max₁ − max₂ over a t grid.
    ZeroTable,
    /// Backprop variation between programs P and Q over random draws.
    VariationHist,
    /// Estimate the zone thresholds τ¹ and τ².
    Thresholds,
    /// Monte Carlo volume of the numerical bifurcation zone (optionally swept).
    ZoneVolume,
    /// Train one network.
    Train,
    /// Parameter distance between training runs that differ only in β.
    WeightDivergence,
    /// Training grid over precision, β and batch normalization.
    BetaSweep,
    /// Print every config key with its default and description.
    Keys,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::ZeroTable => "zero-table",
            Command::VariationHist => "variation-hist",
            Command::Thresholds => "thresholds",
            Command::ZoneVolume => "zone-volume",
            Command::Train => "train",
            Command::WeightDivergence => "weight-divergence",
            Command::BetaSweep => "beta-sweep",
            Command::Keys => "keys",
        }
    }
}

fn raw_config(cli: &Cli) -> Result<RawConfig, ConfigError> {
    let mut raw = RawConfig::default();
    if let Some(path) = &cli.config {
        raw.load(path)?;
    }
    if let Some(p) = &cli.precision {
        raw.set("precision", p)?;
    }
    if let Some(s) = cli.seed {
        raw.set("seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        raw.set("out", &o.display().to_string())?;
    }
    if let Some(t) = cli.threads {
        raw.set("threads", &t.to_string())?;
    }
    if let Some(d) = &cli.data_dir {
        raw.set("data_dir", &d.display().to_string())?;
    }
    for kv in &cli.set {
        raw.apply_assignment(kv)?;
    }
    Ok(raw)
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    if let Command::Keys = cli.command {
        for (key, default, help) in config::KEYS {
            println!("{key:<16} {:<34} {help}", if default.is_empty() { "(unset)" } else { default });
        }
        return Ok(false);
    }
    let raw = raw_config(cli)?;
    let cfg = ExperimentConfig::from_raw(&raw)?;
    let config_json = config::to_json(&raw);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let mut out = Artifacts::create(&cfg.out.join(cli.command.name()))?;
    out.text("config.txt", &config::render(&raw))?;
    let outcome = match cli.command {
        Command::ZeroTable => commands::zero_table(&cfg, &mut out, &config_json),
        Command::VariationHist => commands::variation_hist(&cfg, &mut out, &config_json),
        Command::Thresholds => commands::thresholds(&cfg, &mut out, &config_json),
        Command::ZoneVolume => commands::zone_volume(&cfg, &mut out, &config_json),
        Command::Train => commands::train(&cfg, &mut out, &config_json),
        Command::WeightDivergence => commands::weight_divergence(&cfg, &mut out, &config_json),
        Command::BetaSweep => commands::beta_sweep(&cfg, &mut out, &config_json),
        Command::Keys => unreachable!("handled above"),
    }?;
    let manifest = Manifest {
        tool: "nsad",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name().to_string(),
        config: config_json,
        seeds: commands::seeds(&cfg),
        started_unix_s: started,
        wall_time_s: clock.elapsed().as_secs_f64(),
        diverged: outcome.diverged,
        artifacts: out.files().to_vec(),
    };
    let mut files = out;
    files.json("manifest.json", &manifest)?;
    println!("artifacts written to {}", files.dir().display());
    Ok(outcome.diverged)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("numerical divergence flagged (artifacts written)");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
