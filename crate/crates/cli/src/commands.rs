use nsad_core::data::{load_mnist, resolve_data_dir, Dataset, Split};
use nsad_core::montecarlo::{self, SweepBase, SweepDimension, TauSource};
use nsad_core::network::LeNetOptions;
use nsad_core::precision::Precision;
use nsad_core::rng;
use nsad_core::tensor::ReductionOrder;
use nsad_core::training::{self, TrainConfig, TrainTrace};
use nsad_core::variation::{self, bimodality, Log10Histogram, ProgramPair, Workload};
use nsad_core::zero;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, NetworkChoice};
use crate::output::{Artifacts, Seeds};
use crate::CliError;

/// What a finished command reports back to the dispatcher.
#[derive(Debug, Default)]
pub struct Outcome {
    pub diverged: bool,
}

pub fn seeds(cfg: &ExperimentConfig) -> Seeds {
    let order = |i| cfg.shuffled.then(|| rng::derive_seed(cfg.seed, "order", i));
    Seeds {
        root: cfg.seed,
        train_subset: rng::derive_seed(cfg.seed, "train-subset", 0),
        test_subset: rng::derive_seed(cfg.seed, "test-subset", 0),
        tau1_shuffle: match cfg.tau {
            TauSource::Tau1 { shuffle_seed, .. } => shuffle_seed,
            _ => cfg.tau1_shuffle.then(|| rng::derive_seed(cfg.seed, "tau1", 0)),
        },
        order_p: order(0),
        order_q: order(1),
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let dir = resolve_data_dir(cfg.data_dir.as_deref());
    let load = |split| load_mnist(&dir, split).map_err(|source| CliError::Data { dir: dir.clone(), source });
    let (train, test) = (load(Split::Train)?, load(Split::Test)?);
    let s = seeds(cfg);
    let subset = |ds: Dataset, n: usize, seed: u64| -> Result<Dataset, CliError> {
        if n == 0 || n >= ds.len() {
            Ok(ds)
        } else {
            ds.stratified_subset(n, seed).map_err(|source| CliError::Data { dir: dir.clone(), source })
        }
    };
    Ok((subset(train, cfg.train_size, s.train_subset)?, subset(test, cfg.test_size, s.test_subset)?))
}

fn pair(cfg: &ExperimentConfig) -> ProgramPair {
    let s = seeds(cfg);
    let order = |seed: Option<u64>| seed.map_or(ReductionOrder::Sequential, ReductionOrder::Shuffled);
    ProgramPair {
        policy_p: cfg.policy_p,
        policy_q: cfg.policy_q,
        order_p: order(s.order_p),
        order_q: order(s.order_q),
    }
}

fn workload(cfg: &ExperimentConfig, data: &Dataset) -> Workload {
    let mut w = Workload::new(cfg.spec(), cfg.draws, cfg.seed, data, cfg.batch_size);
    w.threads = cfg.threads;
    w
}

fn lenet_options(cfg: &ExperimentConfig, command: &str) -> Result<LeNetOptions, CliError> {
    match &cfg.network {
        NetworkChoice::LeNet(o) => Ok(*o),
        NetworkChoice::Mlp(_) => Err(CliError::Config(format!("{command} needs network = lenet"))),
    }
}

fn precision_label(p: Precision) -> u32 {
    p.bits()
}

#[derive(Serialize)]
struct ZeroRow {
    t: f64,
    derivative: f64,
}

pub fn zero_table(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let table = zero::zero_table(cfg.variant, cfg.precision, &cfg.x, &cfg.t).map_err(|e| CliError::Config(e.to_string()))?;
    println!("zero'(t), variant {}, {} bits, x = {:?}", table.variant, precision_label(cfg.precision), table.x);
    for (t, v) in table.ts.iter().zip(&table.values) {
        println!("  t = {t:>8e}   {v:e}");
    }
    out.csv("zero_table.csv", table.ts.iter().zip(&table.values).map(|(&t, &derivative)| ZeroRow { t, derivative }))?;
    out.json("zero_table.json", &json!({ "config": config, "table": table }))?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct HistRow {
    log10_lower: f64,
    count: usize,
}

fn hist_rows(h: &Log10Histogram) -> impl Iterator<Item = HistRow> + '_ {
    h.bins.iter().map(|&(log10_lower, count)| HistRow { log10_lower, count })
}

pub fn variation_hist(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let (train, _) = load_data(cfg)?;
    let work = workload(cfg, &train);
    let run = variation::measure_variation(cfg.precision, &work, &pair(cfg), &train)?;
    let hist = Log10Histogram::new(run.valid().map(|r| r.d), cfg.bins_per_decade);
    let bimodal = bimodality(&run.records, cfg.precision.epsilon(), cfg.bins_per_decade);
    let max_d = run.valid().map(|r| r.d).fold(0.0, f64::max);
    println!(
        "{} records ({} NaN), {} zero, max d = {max_d:e}, bimodal = {}",
        run.records.len(),
        run.nan_count,
        hist.zeros,
        bimodal.is_bimodal()
    );
    out.csv("records.csv", run.records.iter())?;
    out.csv("histogram.csv", hist_rows(&hist))?;
    out.csv("relative_histogram.csv", hist_rows(&bimodal.histogram))?;
    out.json(
        "variation.json",
        &json!({
            "config": config,
            "network": work.spec.name,
            "records": run.records.len(),
            "nan_records": run.nan_count,
            "zero_records": hist.zeros,
            "max_d": max_d,
            "histogram": hist,
            "bimodality": bimodal,
            "bimodal": bimodal.is_bimodal(),
        }),
    )?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct ThresholdRow {
    kind: String,
    tau: f64,
    no_positive_variation: bool,
    records: usize,
    nan_records: usize,
}

pub fn thresholds(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let (train, _) = load_data(cfg)?;
    let work = workload(cfg, &train);
    let shuffle = seeds(cfg).tau1_shuffle;
    let t1 = variation::estimate_tau1(cfg.precision, &work, cfg.policy_p, shuffle, cfg.tau1_repeats, &train)?;
    let t2 = variation::estimate_tau2(cfg.precision, &work, cfg.policy_p, &train)?;
    println!("tau1 = {:e}", t1.tau);
    if t2.no_positive_variation {
        println!("tau2 = 0 (no positive ReLU-pair variation)");
    } else {
        println!("tau2 = {:e}", t2.tau);
    }
    let rows = [("tau1", &t1), ("tau2", &t2)].map(|(kind, t)| ThresholdRow {
        kind: kind.into(),
        tau: t.tau,
        no_positive_variation: t.no_positive_variation,
        records: t.records,
        nan_records: t.nan_records,
    });
    out.csv("thresholds.csv", rows)?;
    out.json("thresholds.json", &json!({ "config": config, "tau1": t1, "tau2": t2 }))?;
    Ok(Outcome::default())
}

#[derive(Serialize)]
struct VolumeRow {
    dimension: String,
    value: usize,
    network: String,
    tau: f64,
    m: usize,
    r: usize,
    prop_theta_in_s: f64,
    prop_batches_impacted: f64,
    hoeffding_margin: f64,
    hoeffding_margin_batches: f64,
    mcdiarmid_margin: f64,
}

impl VolumeRow {
    fn new(dimension: &str, value: usize, network: &str, e: &montecarlo::VolumeEstimate) -> Self {
        VolumeRow {
            dimension: dimension.into(),
            value,
            network: network.into(),
            tau: e.tau,
            m: e.m,
            r: e.r,
            prop_theta_in_s: e.prop_theta_in_s,
            prop_batches_impacted: e.prop_batches_impacted,
            hoeffding_margin: e.hoeffding_margin,
            hoeffding_margin_batches: e.hoeffding_margin_batches,
            mcdiarmid_margin: e.mcdiarmid_margin,
        }
    }
}

pub fn zone_volume(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let (train, _) = load_data(cfg)?;
    let pair = pair(cfg);
    if let Some((dim, values)) = &cfg.sweep {
        let base = SweepBase {
            lenet: lenet_options(cfg, "a zone-volume sweep")?,
            batch_size: cfg.batch_size,
            draws: cfg.draws,
            root_seed: cfg.seed,
            threads: cfg.threads,
        };
        let rows = montecarlo::sweep(*dim, values, &base, cfg.precision, &pair, cfg.tau, cfg.risk, &train)?;
        let name = match dim {
            SweepDimension::BatchSize => "batch-size",
            SweepDimension::Depth => "depth",
            SweepDimension::BatchNorm => "batchnorm",
        };
        for r in &rows {
            println!(
                "{name} = {:>4}: in S {:.4}, impacted batches {:.4} (tau {:e})",
                r.value, r.estimate.prop_theta_in_s, r.estimate.prop_batches_impacted, r.estimate.tau
            );
        }
        out.csv("sweep.csv", rows.iter().map(|r| VolumeRow::new(name, r.value, &r.network, &r.estimate)))?;
        out.json("sweep.json", &json!({ "config": config, "rows": rows }))?;
    } else {
        let work = workload(cfg, &train);
        let run = montecarlo::estimate_volume(cfg.precision, &work, &pair, cfg.tau, cfg.risk, &train)?;
        let e = &run.estimate;
        println!(
            "tau = {:e}: theta in S {:.4} ± {:.4}, impacted batches {:.4} ± {:.4} (McDiarmid)",
            e.tau, e.prop_theta_in_s, e.hoeffding_margin, e.prop_batches_impacted, e.mcdiarmid_margin
        );
        out.csv("volume.csv", [VolumeRow::new("none", 0, &work.spec.name, e)])?;
        out.csv("records.csv", run.variation.records.iter())?;
        out.json("volume.json", &json!({ "config": config, "estimate": e, "threshold": run.threshold }))?;
    }
    Ok(Outcome::default())
}

fn train_config(cfg: &ExperimentConfig, precision: Precision) -> TrainConfig {
    TrainConfig {
        optimizer: cfg.optimizer,
        gamma: cfg.gamma,
        alpha: cfg.alpha,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        precision,
        policy: cfg.policy_p,
        seed: cfg.seed,
        strict_b16: cfg.strict_b16,
        ..TrainConfig::default()
    }
}

#[derive(Serialize)]
struct TraceRow {
    run: String,
    epoch: usize,
    train_loss: f64,
    test_accuracy: f64,
    grad_l1: f64,
    param_l1: f64,
    diverged: bool,
}

fn trace_rows<'a>(run: &'a str, t: &'a TrainTrace) -> impl Iterator<Item = TraceRow> + 'a {
    t.epochs.iter().map(move |e| TraceRow {
        run: run.to_string(),
        epoch: e.epoch,
        train_loss: e.train_loss,
        test_accuracy: e.test_accuracy,
        grad_l1: e.grad_l1,
        param_l1: e.param_l1,
        diverged: t.diverged,
    })
}

pub fn train(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let (train, test) = load_data(cfg)?;
    let tc = train_config(cfg, cfg.precision);
    let trace = training::train(&cfg.spec(), &tc, &train, &test)?;
    for e in &trace.epochs {
        println!("epoch {:>3}: loss {:.4}, test accuracy {:.4}", e.epoch, e.train_loss, e.test_accuracy);
    }
    if trace.diverged {
        println!("training diverged{}", if trace.halted { " (halted on a non-finite value)" } else { "" });
    }
    out.csv("trace.csv", trace_rows("train", &trace))?;
    out.json("train.json", &json!({ "config": config, "trace": trace }))?;
    Ok(Outcome { diverged: trace.diverged })
}

#[derive(Serialize)]
struct DivergenceRow {
    label: String,
    beta_ref: f64,
    beta: f64,
    epoch: usize,
    l1: f64,
}

pub fn weight_divergence(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let (train, test) = load_data(cfg)?;
    let tc = train_config(cfg, cfg.precision);
    let wd = training::weight_divergence(&cfg.spec(), &tc, &cfg.betas, &train, &test)?;
    let mut rows = Vec::new();
    for s in &wd.series {
        println!("{}: final L1 distance {:e}", s.label, s.l1.last().copied().unwrap_or(0.0));
        rows.extend(s.l1.iter().enumerate().map(|(epoch, &l1)| DivergenceRow {
            label: s.label.clone(),
            beta_ref: s.beta_ref,
            beta: s.beta,
            epoch,
            l1,
        }));
    }
    out.csv("divergence.csv", rows)?;
    let labels: Vec<String> = wd.series.iter().map(|s| format!("beta={}", s.beta)).collect();
    out.csv("traces.csv", labels.iter().zip(&wd.traces).flat_map(|(l, t)| trace_rows(l, t)))?;
    out.json("weight_divergence.json", &json!({ "config": config, "result": wd }))?;
    Ok(Outcome {
        diverged: wd.traces.iter().any(|t| t.diverged),
    })
}

#[derive(Serialize)]
struct SweepCellRow {
    precision: u32,
    beta: f64,
    batchnorm: bool,
    optimizer: String,
    final_accuracy: f64,
    diverged: bool,
}

pub fn beta_sweep(cfg: &ExperimentConfig, out: &mut Artifacts, config: &serde_json::Value) -> Result<Outcome, CliError> {
    let (train, test) = load_data(cfg)?;
    let base = lenet_options(cfg, "beta-sweep")?;
    let tc = train_config(cfg, cfg.precision);
    let cells = training::beta_sweep(base, &tc, &cfg.precisions, &cfg.betas, &cfg.batchnorm_grid, &train, &test)?;
    for c in &cells {
        println!(
            "{:>2} bits, beta {:>8}, batchnorm {:>5}: accuracy {:.4}{}",
            c.precision.bits(),
            c.beta,
            c.batchnorm,
            c.final_accuracy,
            if c.diverged { " (diverged)" } else { "" }
        );
    }
    out.csv(
        "sweep.csv",
        cells.iter().map(|c| SweepCellRow {
            precision: c.precision.bits(),
            beta: c.beta,
            batchnorm: c.batchnorm,
            optimizer: c.optimizer.clone(),
            final_accuracy: c.final_accuracy,
            diverged: c.diverged,
        }),
    )?;
    let labels: Vec<String> = cells.iter().map(|c| format!("b{}-beta{}-bn{}", c.precision.bits(), c.beta, c.batchnorm)).collect();
    out.csv("traces.csv", labels.iter().zip(&cells).flat_map(|(l, c)| trace_rows(l, &c.trace)))?;
    out.json("beta_sweep.json", &json!({ "config": config, "cells": cells }))?;
    Ok(Outcome {
        diverged: cells.iter().any(|c| c.diverged),
    })
}
