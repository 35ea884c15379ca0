//! Monte Carlo estimates of the numerical bifurcation zone volume.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::network::{LeNetOptions, NetworkError, NetworkSpec};
use crate::nonsmooth::NonsmoothPolicy;
use crate::precision::Precision;
use crate::variation::{
    classify_zone, estimate_tau1, estimate_tau2, measure_variation, ProgramPair, ThresholdEstimate, VariationRecord, VariationRun,
    Workload,
};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Half-width of the two-sided Hoeffding interval for a mean of `n`
/// bounded indicators at risk `alpha`.
pub fn hoeffding_margin(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// McDiarmid half-width for the doubly indexed batch proportion over `m`
/// draws and `r` batches.
pub fn mcdiarmid_margin(m: usize, r: usize, alpha: f64) -> f64 {
    (0.5 * (1.0 / m as f64 + 1.0 / r as f64) * (2.0 / alpha).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    /// Fraction of draws with some batch above τ.
    pub prop_theta_in_s: f64,
    /// Fraction of `(draw, batch)` pairs above τ.
    pub prop_batches_impacted: f64,
    /// Hoeffding half-width for the draw proportion (`n = M`).
    pub hoeffding_margin: f64,
    /// Hoeffding half-width for the batch proportion under iid batches
    /// (`n = M·R`).
    pub hoeffding_margin_batches: f64,
    pub mcdiarmid_margin: f64,
    pub alpha: f64,
    pub m: usize,
    pub r: usize,
    pub tau: f64,
    pub precision: Precision,
}

/// Applies the two proportion estimators to existing records.
pub fn volume_from_records(records: &[VariationRecord], tau: f64, alpha: f64, precision: Precision) -> VolumeEstimate {
    let z = classify_zone(records, tau);
    let m = z.draws.len();
    let r = if m == 0 { 0 } else { z.batches.len() / m };
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    VolumeEstimate {
        prop_theta_in_s: frac(z.draws_in_s(), m),
        prop_batches_impacted: frac(z.impacted_batches(), z.batches.len()),
        hoeffding_margin: hoeffding_margin(m.max(1), alpha),
        hoeffding_margin_batches: hoeffding_margin((m * r).max(1), alpha),
        mcdiarmid_margin: mcdiarmid_margin(m.max(1), r.max(1), alpha),
        alpha,
        m,
        r,
        tau,
        precision,
    }
}

/// Where the zone threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauSource {
    /// Self-variation of P under shuffled orders (`None`: both runs
    /// Sequential, which gives 0).
    Tau1 { shuffle_seed: Option<u64>, repeats: usize },
    /// Smallest positive ReLU-pair variation.
    Tau2,
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRun {
    pub estimate: VolumeEstimate,
    pub threshold: Option<ThresholdEstimate>,
    pub variation: VariationRun,
}

pub fn resolve_tau(
    precision: Precision,
    work: &Workload,
    pair: &ProgramPair,
    source: TauSource,
    data: &Dataset,
) -> Result<(f64, Option<ThresholdEstimate>), NetworkError> {
    Ok(match source {
        TauSource::Explicit(t) => (t, None),
        TauSource::Tau1 { shuffle_seed, repeats } => {
            let t = estimate_tau1(precision, work, pair.policy_p, shuffle_seed, repeats, data)?;
            (t.tau, Some(t))
        }
        TauSource::Tau2 => {
            let t = estimate_tau2(precision, work, pair.policy_p, data)?;
            (t.tau, Some(t))
        }
    })
}

/// Draws `work.draws` parameter sets, measures the pair on every batch and
/// applies the threshold.
pub fn estimate_volume(
    precision: Precision,
    work: &Workload,
    pair: &ProgramPair,
    source: TauSource,
    alpha: f64,
    data: &Dataset,
) -> Result<VolumeRun, NetworkError> {
    let (tau, threshold) = resolve_tau(precision, work, pair, source, data)?;
    let variation = measure_variation(precision, work, pair, data)?;
    Ok(VolumeRun {
        estimate: volume_from_records(&variation.records, tau, alpha, precision),
        threshold,
        variation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepDimension {
    BatchSize,
    /// Extra hidden layers in the classifier head.
    Depth,
    /// 0 = off, anything else = on.
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepBase {
    pub lenet: LeNetOptions,
    pub batch_size: usize,
    pub draws: usize,
    pub root_seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dimension: SweepDimension,
    pub value: usize,
    pub network: String,
    pub estimate: VolumeEstimate,
}

/// One volume estimate per value of `dimension`, everything else fixed.
pub fn sweep(
    dimension: SweepDimension,
    values: &[usize],
    base: &SweepBase,
    precision: Precision,
    pair: &ProgramPair,
    source: TauSource,
    alpha: f64,
    data: &Dataset,
) -> Result<Vec<SweepRow>, NetworkError> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut opts = base.lenet;
        let mut batch = base.batch_size;
        match dimension {
            SweepDimension::BatchSize => batch = value,
            SweepDimension::Depth => opts.extra_hidden = value,
            SweepDimension::BatchNorm => opts.batchnorm = value != 0,
        }
        let spec = NetworkSpec::lenet(opts);
        let mut work = Workload::new(spec, base.draws, base.root_seed, data, batch);
        work.threads = base.threads;
        let run = estimate_volume(precision, &work, pair, source, alpha, data)?;
        rows.push(SweepRow {
            dimension,
            value,
            network: work.spec.name.clone(),
            estimate: run.estimate,
        });
    }
    Ok(rows)
}

/// Native-vs-Minimal MaxPool pair with ReLU'(0) = 0.
pub fn native_minimal_pair() -> ProgramPair {
    let native = NonsmoothPolicy::native();
    ProgramPair::policies(
        native,
        native.with_pool_mode(crate::nonsmooth::PoolMode::Minimal).expect("maxpool mode"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_margins() {
        assert!((hoeffding_margin(1000, 0.05) - (40f64.ln() / 2000.0).sqrt()).abs() < 1e-15);
        assert!((hoeffding_margin(1000, 0.05) - 0.042_946_94).abs() < 1e-8);
        assert!(hoeffding_margin(2000, 0.05) < hoeffding_margin(1000, 0.05));
        assert!(mcdiarmid_margin(1000, 32, 0.05) < mcdiarmid_margin(1000, 16, 0.05));
    }

    #[test]
    fn zero_records_give_zero_volume() {
        let recs: Vec<VariationRecord> = (0..6)
            .map(|i| VariationRecord {
                m: i / 3,
                q: i % 3,
                d: 0.0,
                scale: 1.0,
                nan: false,
            })
            .collect();
        let v = volume_from_records(&recs, 0.0, 0.05, Precision::B32);
        assert_eq!((v.prop_theta_in_s, v.prop_batches_impacted), (0.0, 0.0));
        assert_eq!((v.m, v.r), (2, 3));
        let v = volume_from_records(&recs, f64::INFINITY, 0.05, Precision::B32);
        assert_eq!(v.prop_theta_in_s, 0.0);
    }
}
