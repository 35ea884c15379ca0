//! Backprop variation between two derived-program choices on shared
//! forward passes, thresholds, and zone classification.

use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::data::{Dataset, Normalization};
use crate::network::{forward_loss, init_kaiming_uniform, Mode, NetworkError, NetworkSpec, ParameterSet};
use crate::nonsmooth::NonsmoothPolicy;
use crate::precision::{Precision, Real};
use crate::rng;
use crate::tensor::{ReductionOrder, Tensor};
use crate::with_precision;

/// Two programs differentiating the same forward tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramPair {
    pub policy_p: NonsmoothPolicy,
    pub policy_q: NonsmoothPolicy,
    /// Order for the forward pass and P's backward. A `Shuffled` seed is
    /// re-derived per `(m, q)` record.
    pub order_p: ReductionOrder,
    pub order_q: ReductionOrder,
}

impl ProgramPair {
    /// Same order for both programs.
    pub fn policies(policy_p: NonsmoothPolicy, policy_q: NonsmoothPolicy) -> Self {
        ProgramPair {
            policy_p,
            policy_q,
            order_p: ReductionOrder::Sequential,
            order_q: ReductionOrder::Sequential,
        }
    }

    pub fn swapped(&self) -> Self {
        ProgramPair {
            policy_p: self.policy_q,
            policy_q: self.policy_p,
            order_p: self.order_q,
            order_q: self.order_p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationRecord {
    pub m: usize,
    pub q: usize,
    /// `‖backprop_P − backprop_Q‖₁`, accumulated in binary64.
    pub d: f64,
    /// `‖backprop_P‖₁`, the gradient scale of the record.
    pub scale: f64,
    /// A NaN appeared; the record is excluded from statistics.
    pub nan: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationRun {
    pub precision: Precision,
    pub records: Vec<VariationRecord>,
    pub nan_count: usize,
}

impl VariationRun {
    /// Records without NaN.
    pub fn valid(&self) -> impl Iterator<Item = &VariationRecord> {
        self.records.iter().filter(|r| !r.nan)
    }
}

/// How draws and batches are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub spec: NetworkSpec,
    /// Number of parameter draws `M`.
    pub draws: usize,
    pub root_seed: u64,
    /// Mini-batches as index lists into the dataset.
    pub batches: Vec<Vec<usize>>,
    pub normalization: Normalization,
    pub threads: usize,
}

impl Workload {
    pub fn new(spec: NetworkSpec, draws: usize, root_seed: u64, data: &Dataset, batch_size: usize) -> Self {
        Workload {
            spec,
            draws,
            root_seed,
            batches: data.batches(batch_size),
            normalization: Normalization::Unit,
            threads: 1,
        }
    }
}

/// Parameters of draw `m`.
pub fn draw_params<T: Real>(spec: &NetworkSpec, root_seed: u64, m: usize) -> Result<ParameterSet<T>, NetworkError> {
    init_kaiming_uniform(spec, rng::derive_seed(root_seed, "draw", m as u64))
}

fn instantiate(order: ReductionOrder, role: &str, m: usize, q: usize) -> ReductionOrder {
    match order {
        ReductionOrder::Sequential => ReductionOrder::Sequential,
        ReductionOrder::Shuffled(s) => ReductionOrder::Shuffled(rng::derive_seed(s, role, ((m as u64) << 24) | q as u64)),
    }
}

/// Runs `f(m)` for every draw, on up to `threads` workers, and returns the
/// results in draw order.
fn for_each_draw<R: Send>(draws: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, draws.max(1));
    if threads == 1 {
        return (0..draws).map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..draws).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let chunk = draws.div_ceil(threads);
        for (t, slot) in out.chunks_mut(chunk).enumerate() {
            s.spawn(move || {
                for (i, r) in slot.iter_mut().enumerate() {
                    *r = Some(f(t * chunk + i));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every draw evaluated")).collect()
}

/// Batch tensors at precision `T`.
pub fn materialize<T: Real>(data: &Dataset, batches: &[Vec<usize>], norm: Normalization) -> Vec<(Tensor<T>, Vec<usize>)> {
    batches.iter().map(|b| data.batch(b, norm)).collect()
}

/// `D_{m,q}` for every draw and batch. Each record shares one forward pass
/// (summed loss) between the two backward programs. `extra_q` further
/// instances of Q are evaluated per record (with re-derived shuffle seeds)
/// and the largest variation kept.
pub fn measure_variation_at<T: Real>(work: &Workload, pair: &ProgramPair, data: &Dataset, extra_q: usize) -> Result<VariationRun, NetworkError> {
    let batches = materialize::<T>(data, &work.batches, work.normalization);
    let per_draw = for_each_draw(work.draws, work.threads, |m| -> Result<Vec<VariationRecord>, NetworkError> {
        let params = draw_params::<T>(&work.spec, work.root_seed, m)?;
        let mut recs = Vec::with_capacity(batches.len());
        for (q, (x, y)) in batches.iter().enumerate() {
            let order_p = instantiate(pair.order_p, "order-p", m, q);
            let fwd = forward_loss(&work.spec, &params, x, y, Mode::Train, Reduction::Sum, order_p)?;
            let gp = fwd.tape.backprop(&pair.policy_p, order_p)?;
            let mut rec = VariationRecord {
                m,
                q,
                d: 0.0,
                scale: gp.l1_norm(),
                nan: gp.nan_detected,
            };
            for rep in 0..=extra_q {
                let role = if rep == 0 { "order-q".to_string() } else { format!("order-q{rep}") };
                let gq = fwd.tape.backprop(&pair.policy_q, instantiate(pair.order_q, &role, m, q))?;
                rec.nan |= gq.nan_detected;
                rec.d = rec.d.max(gp.l1_distance(&gq));
            }
            if rec.nan {
                rec.d = f64::NAN;
            }
            recs.push(rec);
        }
        Ok(recs)
    });
    let mut records = Vec::with_capacity(work.draws * batches.len());
    for r in per_draw {
        records.extend(r?);
    }
    let nan_count = records.iter().filter(|r| r.nan).count();
    Ok(VariationRun {
        precision: T::PRECISION,
        records,
        nan_count,
    })
}

pub fn measure_variation(precision: Precision, work: &Workload, pair: &ProgramPair, data: &Dataset) -> Result<VariationRun, NetworkError> {
    with_precision!(precision, T => measure_variation_at::<T>(work, pair, data, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Tau1,
    Tau2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEstimate {
    pub kind: ThresholdKind,
    /// Threshold value; 0 when no positive variation was observed.
    pub tau: f64,
    /// τ² only: every record was zero.
    pub no_positive_variation: bool,
    pub network: String,
    pub precision: Precision,
    pub draws: usize,
    pub batch_size: usize,
    pub records: usize,
    pub nan_records: usize,
}

fn batch_size(work: &Workload) -> usize {
    work.batches.first().map_or(0, Vec::len)
}

/// τ¹: the largest variation between a policy and itself under
/// independently shuffled reduction orders. With `shuffle_seed = None` both
/// runs are Sequential and the result is 0.
pub fn estimate_tau1(
    precision: Precision,
    work: &Workload,
    policy: NonsmoothPolicy,
    shuffle_seed: Option<u64>,
    repeats: usize,
    data: &Dataset,
) -> Result<ThresholdEstimate, NetworkError> {
    let order = shuffle_seed.map_or(ReductionOrder::Sequential, ReductionOrder::Shuffled);
    let pair = ProgramPair {
        policy_p: policy,
        policy_q: policy,
        order_p: order,
        order_q: order,
    };
    let run = with_precision!(precision, T => measure_variation_at::<T>(work, &pair, data, repeats.saturating_sub(1))?);
    let tau = run.valid().map(|r| r.d).fold(0.0, f64::max);
    Ok(ThresholdEstimate {
        kind: ThresholdKind::Tau1,
        tau,
        no_positive_variation: tau == 0.0,
        network: work.spec.name.clone(),
        precision,
        draws: work.draws,
        batch_size: batch_size(work),
        records: run.records.len(),
        nan_records: run.nan_count,
    })
}

/// The ReLU pair `R⁰` (`ReLU'(0)=0`) vs `R¹` (`ReLU'(0)=1`) with `pool`
/// as the common pooling selection.
pub fn relu_pair(base: NonsmoothPolicy) -> ProgramPair {
    ProgramPair::policies(
        base.with_relu_s(0.0).expect("0 is a valid slope"),
        base.with_relu_s(1.0).expect("1 is a valid slope"),
    )
}

/// τ²: smallest positive variation between `R⁰` and `R¹` under
/// Sequential order.
pub fn estimate_tau2(precision: Precision, work: &Workload, base: NonsmoothPolicy, data: &Dataset) -> Result<ThresholdEstimate, NetworkError> {
    let run = measure_variation(precision, work, &relu_pair(base), data)?;
    let tau = run.valid().map(|r| r.d).filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
    let none = !tau.is_finite();
    Ok(ThresholdEstimate {
        kind: ThresholdKind::Tau2,
        tau: if none { 0.0 } else { tau },
        no_positive_variation: none,
        network: work.spec.name.clone(),
        precision,
        draws: work.draws,
        batch_size: batch_size(work),
        records: run.records.len(),
        nan_records: run.nan_count,
    })
}

/// Zone labels for a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneClassification {
    pub tau: f64,
    /// `(m, in S)` per draw, ascending `m`.
    pub draws: Vec<(usize, bool)>,
    /// `(m, q, impacted)` per valid record.
    pub batches: Vec<(usize, usize, bool)>,
}

impl ZoneClassification {
    pub fn draws_in_s(&self) -> usize {
        self.draws.iter().filter(|d| d.1).count()
    }

    pub fn impacted_batches(&self) -> usize {
        self.batches.iter().filter(|b| b.2).count()
    }
}

/// A draw is in S iff one of its batches has `d > tau`. NaN records are
/// skipped.
pub fn classify_zone(records: &[VariationRecord], tau: f64) -> ZoneClassification {
    let mut draws: Vec<(usize, bool)> = Vec::new();
    let mut batches = Vec::with_capacity(records.len());
    let mut sorted: Vec<&VariationRecord> = records.iter().filter(|r| !r.nan).collect();
    sorted.sort_by_key(|r| (r.m, r.q));
    for r in sorted {
        let hit = r.d > tau;
        batches.push((r.m, r.q, hit));
        match draws.last_mut() {
            Some((m, flag)) if *m == r.m => *flag |= hit,
            _ => draws.push((r.m, hit)),
        }
    }
    ZoneClassification { tau, draws, batches }
}

/// Histogram over `log₁₀` of positive values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Log10Histogram {
    pub bins_per_decade: u32,
    /// `(lower edge exponent, count)` for every bin between the extremes.
    pub bins: Vec<(f64, usize)>,
    pub zeros: usize,
    pub total: usize,
}

impl Log10Histogram {
    pub fn new(values: impl IntoIterator<Item = f64>, bins_per_decade: u32) -> Self {
        let k = bins_per_decade.max(1) as f64;
        let mut zeros = 0;
        let mut idx = Vec::new();
        let mut total = 0;
        for v in values {
            total += 1;
            if v > 0.0 && v.is_finite() {
                idx.push((v.log10() * k).floor() as i64);
            } else if v == 0.0 {
                zeros += 1;
            }
        }
        let bins = match (idx.iter().min(), idx.iter().max()) {
            (Some(&lo), Some(&hi)) => {
                let mut counts = vec![0usize; (hi - lo + 1) as usize];
                for i in &idx {
                    counts[(i - lo) as usize] += 1;
                }
                counts.into_iter().enumerate().map(|(j, c)| ((lo + j as i64) as f64 / k, c)).collect()
            }
            _ => Vec::new(),
        };
        Log10Histogram {
            bins_per_decade,
            bins,
            zeros,
            total,
        }
    }

    pub fn positive(&self) -> usize {
        self.bins.iter().map(|b| b.1).sum()
    }
}

/// Split of positive variations into a compensation band and a bifurcation
/// band, measured relative to `ε · scale` of each record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    /// Histogram of `log₁₀(d / (ε·scale))` over positive records.
    pub histogram: Log10Histogram,
    /// Mode exponent among records with ratio below 10.
    pub low_mode: Option<f64>,
    /// Mode exponent among records at least three decades above the low mode.
    pub high_mode: Option<f64>,
    /// Records with ratio below 10.
    pub low_count: usize,
    /// Records at least three decades above the low mode.
    pub high_count: usize,
    /// Everything else.
    pub between: usize,
}

impl Bimodality {
    /// Two nonempty modes, at least three decades apart, separated by a
    /// valley: some bin between them holds fewer records than either mode.
    pub fn is_bimodal(&self) -> bool {
        let (Some(lo), Some(hi)) = (self.low_mode, self.high_mode) else { return false };
        if hi - lo < 3.0 {
            return false;
        }
        let count_at = |e: f64| self.histogram.bins.iter().find(|b| (b.0 - e).abs() < 1e-9).map_or(0, |b| b.1);
        let floor = count_at(lo).min(count_at(hi));
        self.histogram.bins.iter().any(|b| b.0 > lo && b.0 < hi && b.1 < floor)
    }
}

pub fn bimodality(records: &[VariationRecord], eps: f64, bins_per_decade: u32) -> Bimodality {
    let ratios: Vec<f64> = records
        .iter()
        .filter(|r| !r.nan && r.d > 0.0 && r.scale > 0.0)
        .map(|r| r.d / (eps * r.scale))
        .collect();
    let histogram = Log10Histogram::new(ratios.iter().copied(), bins_per_decade);
    let mode_in = |lo: f64, hi: f64| {
        histogram
            .bins
            .iter()
            .filter(|b| b.0 >= lo && b.0 < hi && b.1 > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.total_cmp(&a.0)))
            .map(|b| b.0)
    };
    let low_mode = mode_in(f64::NEG_INFINITY, 1.0);
    let high_mode = low_mode.and_then(|lo| mode_in(lo + 3.0, f64::INFINITY));
    let low_count = ratios.iter().filter(|&&r| r < 10.0).count();
    let high_count = low_mode.map_or(0, |lo| ratios.iter().filter(|&&r| r >= 10f64.powf(lo + 3.0)).count());
    Bimodality {
        between: ratios.len() - low_count - high_count,
        histogram,
        low_mode,
        high_mode,
        low_count,
        high_count,
    }
}
