mod common;

use common::{gaussian, random_images, ulp};
use nsad_core::autodiff::{NodeId, Reduction, Tape};
use nsad_core::network::{forward_loss, init_kaiming_uniform, LeNetOptions, Mode, NetworkSpec};
use nsad_core::nonsmooth::{NonsmoothPolicy, PoolMode};
use nsad_core::precision::{Precision, Real, F16};
use nsad_core::tensor::{cast, ReductionOrder, Tensor};
use proptest::prelude::*;

const SEQ: ReductionOrder = ReductionOrder::Sequential;

fn lenet() -> NetworkSpec {
    NetworkSpec::lenet(LeNetOptions::default())
}

fn lenet_tape<T: Real>(seed: u64) -> Tape<T> {
    let spec = lenet();
    let p = init_kaiming_uniform::<T>(&spec, seed).unwrap();
    let x = cast::<f64, T>(&random_images(2, seed ^ 0xa5));
    forward_loss(&spec, &p, &x, &[1, 7], Mode::Train, Reduction::Sum, SEQ).unwrap().tape
}

#[test]
fn backprop_is_deterministic_across_runs_and_threads() {
    fn check<T: Real>() {
        let tape = lenet_tape::<T>(5);
        let policy = NonsmoothPolicy::native();
        let g = tape.backprop(&policy, SEQ).unwrap();
        assert!(g.bit_eq(&tape.backprop(&policy, SEQ).unwrap()));
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..3).map(|_| s.spawn(|| tape.backprop(&policy, SEQ).unwrap())).collect();
            for h in handles {
                assert!(g.bit_eq(&h.join().unwrap()));
            }
        });
    }
    check::<f64>();
    check::<f32>();
    check::<F16>();
}

/// `softmax_xent(linear(x⊙x + x, W, b))`, a C¹ program.
fn smooth_program<T: Real>(x: &[f64], w: &[f64], b: &[f64], labels: &[usize]) -> Tape<T> {
    let mut t = Tape::new(SEQ);
    let xn = t.leaf(Tensor::from_f64(&[2, 4], x).unwrap());
    let wn = t.leaf(Tensor::from_f64(&[3, 4], w).unwrap());
    let bn = t.leaf(Tensor::from_f64(&[3], b).unwrap());
    let sq = t.mul(xn, xn).unwrap();
    let h = t.add(sq, xn).unwrap();
    let z = t.linear(h, wn, Some(bn)).unwrap();
    t.softmax_xent(z, labels, Reduction::Mean).unwrap();
    t
}

fn central_differences(x: &[f64], w: &[f64], b: &[f64], labels: &[usize]) -> Vec<f64> {
    let h = 1e-6;
    let mut out = Vec::new();
    let inputs = [x.to_vec(), w.to_vec(), b.to_vec()];
    for k in 0..3 {
        for i in 0..inputs[k].len() {
            let eval = |d: f64| {
                let mut v = inputs.clone();
                v[k][i] += d;
                smooth_program::<f64>(&v[0], &v[1], &v[2], labels).output().item()
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    out
}

fn smooth_case<T: Real>(x: &[f64], w: &[f64], b: &[f64], labels: &[usize]) -> f64 {
    // Round the inputs into the format once; the oracle sees the same point.
    let r = |v: &[f64]| v.iter().map(|&a| T::from_f64(a).to_f64()).collect::<Vec<_>>();
    let (x, w, b) = (r(x), r(w), r(b));
    let tape = smooth_program::<T>(&x, &w, &b, labels);
    let bp: Vec<f64> = tape.backprop(&NonsmoothPolicy::native(), SEQ).unwrap().flatten().iter().map(|v| v.to_f64()).collect();
    let fd = central_differences(&x, &w, &b, labels);
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = bp.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    err / scale.max(1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smooth_programs_match_central_differences(
        x in prop::collection::vec(-1.0f64..1.0, 8),
        w in prop::collection::vec(-1.0f64..1.0, 12),
        b in prop::collection::vec(-0.5f64..0.5, 3),
        l0 in 0usize..3, l1 in 0usize..3,
    ) {
        let labels = [l0, l1];
        for p in Precision::ALL {
            let rel = match p {
                Precision::B16 => smooth_case::<F16>(&x, &w, &b, &labels),
                Precision::B32 => smooth_case::<f32>(&x, &w, &b, &labels),
                Precision::B64 => smooth_case::<f64>(&x, &w, &b, &labels),
            };
            // The binary64 oracle itself carries ~1e-9 of truncation error.
            let tol = (10.0 * p.epsilon().sqrt()).max(1e-7);
            prop_assert!(rel <= tol, "{}: relative error {} > {}", p, rel, tol);
        }
    }
}

#[test]
fn policy_locality_away_from_kinks() {
    for seed in 0..3 {
        let tape = lenet_tape::<f32>(seed);
        let k = tape.kinks();
        assert_eq!((k.relu_zeros, k.tied_windows), (0, 0), "continuous inputs should avoid kinks");
        let base = tape.backprop(&NonsmoothPolicy::native(), SEQ).unwrap();
        for s in [0.5, 1.0] {
            let p = NonsmoothPolicy::native().with_relu_s(s).unwrap();
            assert!(base.bit_eq(&tape.backprop(&p, SEQ).unwrap()), "relu_s = {s}");
        }
        for mode in [PoolMode::Minimal, PoolMode::Hybrid(0.3), PoolMode::Hybrid(1e4)] {
            let p = NonsmoothPolicy::native().with_pool_mode(mode).unwrap();
            assert!(base.bit_eq(&tape.backprop(&p, SEQ).unwrap()), "{mode}");
        }
    }
}

#[test]
fn relu_slope_matters_only_at_zero() {
    // One ReLU exactly at 0 and one away from it.
    let mut t = Tape::<f64>::new(SEQ);
    let x = t.leaf(Tensor::vector(&[0.0, 2.0]));
    let r = t.relu(x).unwrap();
    t.sum(r).unwrap();
    let g = |s: f64| t.backprop(&NonsmoothPolicy::native().with_relu_s(s).unwrap(), SEQ).unwrap().params[0].to_f64_vec();
    assert_eq!(g(0.0), vec![0.0, 1.0]);
    assert_eq!(g(0.25), vec![0.25, 1.0]);
}

/// Integer-valued conv → relu → maxpool → linear tape with two scalar heads
/// sharing its forward values. Every intermediate is an exact binary64
/// integer, so the backward pass is exact too.
fn integer_heads(x: &[i8], w: &[i8], w2: &[i8], c: &[i8], a: f64, b: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let f = |v: &[i8]| v.iter().map(|&i| i as f64).collect::<Vec<_>>();
    let mut t = Tape::<f64>::new(SEQ);
    let xn = t.leaf(Tensor::from_f64(&[1, 1, 6, 6], &f(x)).unwrap());
    let wn = t.leaf(Tensor::from_f64(&[2, 1, 3, 3], &f(w)).unwrap());
    let bn = t.leaf(Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
    let w2n = t.leaf(Tensor::from_f64(&[3, 8], &f(w2)).unwrap());
    let y = t.conv2d(xn, wn, Some(bn)).unwrap();
    let y = t.relu(y).unwrap();
    let y = t.maxpool(y, (2, 2)).unwrap();
    let y = t.reshape(y, &[1, 8]).unwrap();
    let out = t.linear(y, w2n, None).unwrap();
    let cn = t.constant(Tensor::from_f64(&[1, 3], &f(c)).unwrap());
    let m1 = t.mul(out, cn).unwrap();
    let l1 = t.sum(m1).unwrap();
    let m2 = t.mul(out, out).unwrap();
    let l2 = t.sum(m2).unwrap();
    let s1 = t.mul_const(l1, a).unwrap();
    let s2 = t.mul_const(l2, b).unwrap();
    let root = t.add(s1, s2).unwrap();
    let p = NonsmoothPolicy::native();
    let g = |n: NodeId| t.backprop_from(n, &p, SEQ).unwrap().flatten();
    (g(l1), g(l2), g(root))
}

proptest! {
    #[test]
    fn vjp_is_linear_in_the_seed_on_exact_tapes(
        x in prop::collection::vec(-3i8..=3, 36),
        w in prop::collection::vec(-2i8..=2, 18),
        w2 in prop::collection::vec(-2i8..=2, 24),
        c in prop::collection::vec(-3i8..=3, 3),
        a in -5i8..=5, b in -5i8..=5,
    ) {
        let (a, b) = (a as f64, b as f64);
        let (g1, g2, gr) = integer_heads(&x, &w, &w2, &c, a, b);
        for i in 0..gr.len() {
            let expect = a * g1[i] + b * g2[i];
            prop_assert!((gr[i] - expect).abs() <= ulp(expect), "element {}: {} vs {}", i, gr[i], expect);
        }
    }
}

#[test]
fn vjp_linearity_on_lenet_is_bounded_by_rounding() {
    // Real-valued layers reassociate (u+v)·W vs u·W + v·W, so the identity
    // holds to rounding relative to the gradient scale, not per element.
    let spec = lenet();
    let p = init_kaiming_uniform::<f64>(&spec, 3).unwrap();
    let x = random_images(2, 9);
    let (a, b) = (0.3, -1.7);
    let mut f = forward_loss(&spec, &p, &x, &[3, 5], Mode::Train, Reduction::Mean, SEQ).unwrap();
    let loss = NodeId(f.tape.len() - 1);
    let sq = f.tape.mul(f.logits, f.logits).unwrap();
    let l2 = f.tape.sum(sq).unwrap();
    let s1 = f.tape.mul_const(loss, a).unwrap();
    let s2 = f.tape.mul_const(l2, b).unwrap();
    let root = f.tape.add(s1, s2).unwrap();
    let pol = NonsmoothPolicy::native();
    let g1 = f.tape.backprop_from(loss, &pol, SEQ).unwrap().flatten();
    let g2 = f.tape.backprop_from(l2, &pol, SEQ).unwrap().flatten();
    let gr = f.tape.backprop_from(root, &pol, SEQ).unwrap().flatten();
    let scale = g1.iter().zip(&g2).fold(0.0f64, |m, (u, v)| m.max((a * u).abs() + (b * v).abs()));
    let err = (0..gr.len()).fold(0.0f64, |m, i| m.max((gr[i] - (a * g1[i] + b * g2[i])).abs()));
    assert!(err <= 1e3 * f64::EPSILON * scale, "err {err:e} scale {scale:e}");
}

#[test]
fn gaussian_helper_is_reproducible() {
    assert_eq!(gaussian(5, 1), gaussian(5, 1));
}
