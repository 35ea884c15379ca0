#![allow(dead_code)]

use nsad_core::data::{synth_tied, Dataset};
use nsad_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Spacing of binary64 numbers at `|x|`.
pub fn ulp(x: f64) -> f64 {
    let a = x.abs();
    if a == 0.0 || !a.is_finite() {
        return f64::from_bits(1);
    }
    f64::from_bits(a.to_bits() + 1) - a
}

pub fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            // Box–Muller; plenty for test inputs.
            let (u, v): (f64, f64) = (r.gen_range(1e-12..1.0), r.gen());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

/// `[n, 1, 28, 28]` batch of continuous random pixels: no exact ties.
pub fn random_images(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_f64(&[n, 1, 28, 28], &gaussian(n * 784, seed)).unwrap()
}

/// The repository's MNIST subset.
pub fn mnist_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn small_tied_dataset(n: usize) -> Dataset {
    synth_tied(n, 0.25, 11).unwrap()
}

/// `a + b` as an unevaluated pair `(s, e)` with `s + e` exact.
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `a · b` as `(p, e)` with `p + e` exact (Dekker's split; no fused ops).
pub fn two_product(a: f64, b: f64) -> (f64, f64) {
    let split = |x: f64| {
        let c = 134_217_729.0 * x; // 2^27 + 1
        let hi = c - (c - x);
        (hi, x - hi)
    };
    let p = a * b;
    let ((ah, al), (bh, bl)) = (split(a), split(b));
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

/// Compensated sum: within about half an ulp of the exact sum here.
pub fn neumaier(xs: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// `(1 − β)·n + β·m` evaluated without intermediate rounding, then rounded
/// once (up to the compensated sum).
pub fn exact_blend(beta: f64, n: f64, m: f64) -> f64 {
    let (oh, ol) = two_sum(1.0, -beta);
    let (p1, e1) = two_product(oh, n);
    let (p2, e2) = two_product(ol, n);
    let (p3, e3) = two_product(beta, m);
    neumaier(&[p1, p3, p2, e1, e3, e2])
}
