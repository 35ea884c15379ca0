mod common;

use common::small_tied_dataset;
use nsad_core::autodiff::Tape;
use nsad_core::montecarlo::native_minimal_pair;
use nsad_core::network::{LeNetOptions, NetworkSpec, PoolKind};
use nsad_core::nonsmooth::{NonsmoothPolicy, PoolMode};
use nsad_core::precision::{Precision, Real, F16};
use nsad_core::tensor::{ReductionOrder, Tensor};
use nsad_core::variation::{classify_zone, measure_variation, ProgramPair, VariationRecord, Workload};
use proptest::prelude::*;

fn workload(opts: LeNetOptions, draws: usize) -> (Workload, nsad_core::data::Dataset) {
    let data = small_tied_dataset(24);
    (Workload::new(NetworkSpec::lenet(opts), draws, 5, &data, 8), data)
}

#[test]
fn variation_is_symmetric_in_the_pair() {
    let (work, data) = workload(LeNetOptions::default(), 3);
    let pair = native_minimal_pair();
    for p in [Precision::B32, Precision::B16] {
        let a = measure_variation(p, &work, &pair, &data).unwrap();
        let b = measure_variation(p, &work, &pair.swapped(), &data).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!((x.m, x.q, x.d.to_bits()), (y.m, y.q, y.d.to_bits()));
        }
        assert!(a.valid().any(|r| r.d > 0.0), "tied fixture should separate the pair at {p}");
    }
}

#[test]
fn a_policy_against_itself_gives_zero_records() {
    let (work, data) = workload(LeNetOptions { batchnorm: true, ..Default::default() }, 2);
    for mode in [PoolMode::Native, PoolMode::Minimal, PoolMode::Hybrid(7.0)] {
        let p = NonsmoothPolicy::native().with_pool_mode(mode).unwrap();
        let run = measure_variation(Precision::B32, &work, &ProgramPair::policies(p, p), &data).unwrap();
        assert!(run.records.iter().all(|r| r.d == 0.0 && !r.nan), "{mode}");
    }
}

#[test]
fn threads_do_not_change_records() {
    let (mut work, data) = workload(LeNetOptions::default(), 4);
    let pair = native_minimal_pair();
    let serial = measure_variation(Precision::B32, &work, &pair, &data).unwrap();
    work.threads = 3;
    assert_eq!(serial, measure_variation(Precision::B32, &work, &pair, &data).unwrap());
}

fn records() -> impl Strategy<Value = Vec<VariationRecord>> {
    prop::collection::vec((0usize..6, 0usize..4, prop_oneof![Just(0.0), 1e-12f64..1.0], any::<bool>()), 1..40).prop_map(|v| {
        v.into_iter()
            .map(|(m, q, d, nan)| VariationRecord {
                m,
                q,
                d,
                scale: 1.0,
                nan: nan && d > 0.5,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn raising_tau_shrinks_the_zone(recs in records(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = classify_zone(&recs, lo);
        let b = classify_zone(&recs, hi);
        prop_assert_eq!(a.draws.len(), b.draws.len());
        for (x, y) in a.draws.iter().zip(&b.draws) {
            prop_assert_eq!(x.0, y.0);
            prop_assert!(!y.1 || x.1, "draw {} in S at {} but not at {}", x.0, hi, lo);
        }
        prop_assert!(b.impacted_batches() <= a.impacted_batches());
    }

    #[test]
    fn every_draw_is_labelled_exactly_once(recs in records(), tau in 0.0f64..1.0) {
        let z = classify_zone(&recs, tau);
        let mut ms: Vec<usize> = recs.iter().filter(|r| !r.nan).map(|r| r.m).collect();
        ms.sort_unstable();
        ms.dedup();
        prop_assert_eq!(z.draws.iter().map(|d| d.0).collect::<Vec<_>>(), ms);
        for (m, in_s) in &z.draws {
            let any = recs.iter().any(|r| !r.nan && r.m == *m && r.d > tau);
            prop_assert_eq!(*in_s, any);
        }
    }
}

/// L1 gap between the two NormPool programs on one tape, with the L1 of
/// the first program's gradient as scale (as the harness records it).
fn normpool_gap<T: Real>(x: &[f64], c: &[f64]) -> (f64, f64) {
    let mut t = Tape::<T>::new(ReductionOrder::Sequential);
    let xn = t.leaf(Tensor::from_f64(&[1, 1, 4, 4], x).unwrap());
    let y = t.normpool(xn, (2, 2)).unwrap();
    let cn = t.constant(Tensor::from_f64(&[1, 1, 2, 2], c).unwrap());
    let m = t.mul(y, cn).unwrap();
    t.sum(m).unwrap();
    let g = |mode| t.backprop(&NonsmoothPolicy::native().with_pool_mode(mode).unwrap(), ReductionOrder::Sequential).unwrap().flatten();
    let (a, b) = (g(PoolMode::NormPoolZero), g(PoolMode::NormPoolUniform));
    let d = a.iter().zip(&b).map(|(u, v)| (u.to_f64() - v.to_f64()).abs()).sum();
    (d, a.iter().map(|u| u.to_f64().abs()).sum())
}

proptest! {
    #[test]
    fn normpool_programs_either_agree_or_split_macroscopically(
        x in prop::collection::vec(prop_oneof![Just(0.0), -4.0f64..4.0], 16),
        c in prop::collection::vec(0.1f64..2.0, 4),
    ) {
        // Each all-zero 2×2 window gets 4 entries of c/√4 under the uniform
        // program and nothing under the zero program.
        let zero_window = |w: usize| (0..4).all(|k| x[(w / 2 * 2 + k / 2) * 4 + w % 2 * 2 + k % 2] == 0.0);
        let split = |round: fn(f64) -> f64| (0..4).filter(|&w| zero_window(w)).map(|w| 2.0 * round(c[w])).sum::<f64>();
        let (d16, _) = normpool_gap::<F16>(&x, &c);
        prop_assert_eq!(d16, split(|v| F16::from_f64(v).to_f64()));
        for (d, scale, eps) in [
            { let (d, s) = normpool_gap::<f32>(&x, &c); (d, s, Precision::B32.epsilon()) },
            { let (d, s) = normpool_gap::<f64>(&x, &c); (d, s, Precision::B64.epsilon()) },
        ] {
            prop_assert!(d == 0.0 || d >= 1e3 * eps * scale, "d = {}, scale = {}", d, scale);
        }
        let (d32, _) = normpool_gap::<f32>(&x, &c);
        prop_assert_eq!(d32, split(|v| v as f32 as f64));
    }
}

#[test]
fn normpool_lenet_has_an_empty_compensation_band() {
    let opts = LeNetOptions { pool: PoolKind::Norm, ..Default::default() };
    let (work, data) = workload(opts, 4);
    let base = NonsmoothPolicy::native();
    let pair = ProgramPair::policies(
        base.with_pool_mode(PoolMode::NormPoolZero).unwrap(),
        base.with_pool_mode(PoolMode::NormPoolUniform).unwrap(),
    );
    let run = measure_variation(Precision::B16, &work, &pair, &data).unwrap();
    let eps = Precision::B16.epsilon();
    assert!(run.valid().all(|r| r.d == 0.0 || r.d >= 1e3 * eps * r.scale));
}
