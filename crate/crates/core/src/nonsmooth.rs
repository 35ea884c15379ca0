//! Forward rules and selectable derived programs for the nonsmooth
//! primitives: ReLU, max over a window, MaxPool and NormPool.
//!
//! A derived program is the backward rule attached to an elementary forward
//! program. Where the forward program is differentiable all choices agree;
//! where it is not (ReLU at 0, a pooling window with several maximal entries,
//! a NormPool window of norm 0) each choice picks a different element of the
//! Clarke Jacobian, and [`NonsmoothPolicy`] says which one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::precision::Real;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("ReLU'(0) must lie in [0, 1], got {0}")]
    ReluSlope(f64),
    #[error("hybrid blend must be a finite β ≥ 0, got {0}")]
    HybridBeta(f64),
    #[error("unknown pool mode {0:?} (expected native, minimal, hybrid:<beta>, normpool-zero, normpool-uniform)")]
    UnknownPoolMode(String),
    #[error("pool mode {mode} cannot differentiate a {op} node")]
    Incompatible { mode: PoolMode, op: &'static str },
}

/// Derived program used for pooling windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PoolMode {
    /// Whole upstream gradient to the first maximal index (row-major order).
    Native,
    /// Upstream gradient split evenly over the maximal indices.
    Minimal,
    /// `(1-β)·Native + β·Minimal`.
    Hybrid(f64),
    /// NormPool: zero gradient on a window of norm 0.
    NormPoolZero,
    /// NormPool: uniform unit direction `1/√s` on a window of norm 0.
    NormPoolUniform,
}

impl PoolMode {
    pub fn hybrid(beta: f64) -> Result<Self, PolicyError> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(PolicyError::HybridBeta(beta));
        }
        Ok(PoolMode::Hybrid(beta))
    }

    pub fn is_normpool(self) -> bool {
        matches!(self, PoolMode::NormPoolZero | PoolMode::NormPoolUniform)
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolMode::Native => write!(f, "native"),
            PoolMode::Minimal => write!(f, "minimal"),
            PoolMode::Hybrid(b) => write!(f, "hybrid:{b}"),
            PoolMode::NormPoolZero => write!(f, "normpool-zero"),
            PoolMode::NormPoolUniform => write!(f, "normpool-uniform"),
        }
    }
}

impl FromStr for PoolMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "native" => Ok(PoolMode::Native),
            "minimal" => Ok(PoolMode::Minimal),
            "normpool-zero" => Ok(PoolMode::NormPoolZero),
            "normpool-uniform" => Ok(PoolMode::NormPoolUniform),
            _ => match s.strip_prefix("hybrid:") {
                Some(b) => {
                    let beta = b.parse::<f64>().map_err(|_| PolicyError::UnknownPoolMode(s.clone()))?;
                    PoolMode::hybrid(beta)
                }
                None => Err(PolicyError::UnknownPoolMode(s)),
            },
        }
    }
}

/// Choice of derived programs for every nonsmooth primitive of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonsmoothPolicy {
    relu_s: f64,
    pool_mode: PoolMode,
}

impl NonsmoothPolicy {
    pub fn new(relu_s: f64, pool_mode: PoolMode) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&relu_s) {
            return Err(PolicyError::ReluSlope(relu_s));
        }
        if let PoolMode::Hybrid(b) = pool_mode {
            PoolMode::hybrid(b)?;
        }
        Ok(NonsmoothPolicy { relu_s, pool_mode })
    }

    /// ReLU'(0) = 0, native MaxPool.
    pub fn native() -> Self {
        NonsmoothPolicy {
            relu_s: 0.0,
            pool_mode: PoolMode::Native,
        }
    }

    pub fn with_pool_mode(self, pool_mode: PoolMode) -> Result<Self, PolicyError> {
        NonsmoothPolicy::new(self.relu_s, pool_mode)
    }

    pub fn with_relu_s(self, relu_s: f64) -> Result<Self, PolicyError> {
        NonsmoothPolicy::new(relu_s, self.pool_mode)
    }

    pub fn relu_s(&self) -> f64 {
        self.relu_s
    }

    pub fn pool_mode(&self) -> PoolMode {
        self.pool_mode
    }
}

impl Default for NonsmoothPolicy {
    fn default() -> Self {
        NonsmoothPolicy::native()
    }
}

impl fmt::Display for NonsmoothPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "relu_s={} pool={}", self.relu_s, self.pool_mode)
    }
}

// ---------------------------------------------------------------- ReLU

pub fn relu_forward<T: Real>(x: T) -> T {
    if x > T::ZERO {
        x
    } else if x.is_nan() {
        x
    } else {
        T::ZERO
    }
}

/// Selected derivative: 0 below zero, 1 above, `s` at exactly zero (either
/// sign of zero). NaN input yields NaN.
pub fn relu_backward<T: Real>(x: T, s: T) -> T {
    if x > T::ZERO {
        T::ONE
    } else if x < T::ZERO {
        T::ZERO
    } else if x == T::ZERO {
        s
    } else {
        x
    }
}

// ---------------------------------------------------------------- windows

/// Non-overlapping pooling geometry: `m×n` windows over a `p×q` plane with
/// stride equal to the window. Trailing rows/columns that do not fill a
/// window are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: (usize, usize),
    pub input: (usize, usize),
}

impl PoolGeometry {
    pub fn new(window: (usize, usize), input: (usize, usize)) -> Result<Self, TensorError> {
        if window.0 == 0 || window.1 == 0 || input.0 < window.0 || input.1 < window.1 {
            return Err(TensorError::ShapeMismatch {
                op: "pool geometry",
                lhs: vec![input.0, input.1],
                rhs: vec![window.0, window.1],
            });
        }
        Ok(PoolGeometry { window, input })
    }

    pub fn output(&self) -> (usize, usize) {
        (self.input.0 / self.window.0, self.input.1 / self.window.1)
    }

    /// Window size `s = m·n`.
    pub fn window_len(&self) -> usize {
        self.window.0 * self.window.1
    }

    /// Flat input offsets of window `(i, j)` in row-major window order.
    fn window_offsets(&self, i: usize, j: usize) -> impl Iterator<Item = usize> + Clone + '_ {
        let (m, n) = self.window;
        let q = self.input.1;
        (0..m).flat_map(move |a| (0..n).map(move |b| (i * m + a) * q + j * n + b))
    }
}

/// Indices of a window attaining its maximum, in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub indices: Vec<(usize, usize)>,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn first(&self) -> (usize, usize) {
        self.indices[0]
    }
}

/// Active sets of many windows, stored flat: window `w` owns
/// `indices[offsets[w]..offsets[w+1]]`, each an absolute input offset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActiveSets {
    offsets: Vec<u32>,
    indices: Vec<u32>,
}

impl ActiveSets {
    fn with_capacity(windows: usize) -> Self {
        let mut offsets = Vec::with_capacity(windows + 1);
        offsets.push(0);
        ActiveSets {
            offsets,
            indices: Vec::with_capacity(windows),
        }
    }

    pub fn windows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn get(&self, w: usize) -> &[u32] {
        &self.indices[self.offsets[w] as usize..self.offsets[w + 1] as usize]
    }

    /// Number of windows with more than one maximal entry.
    pub fn tied_windows(&self) -> usize {
        self.offsets.windows(2).filter(|o| o[1] - o[0] > 1).count()
    }

    fn close_window(&mut self) {
        self.offsets.push(self.indices.len() as u32);
    }
}

/// Max of the window values at `offsets`, with its active set appended to
/// `out`. The maximum is found with a strict `>` scan (first maximum kept);
/// ties are exact equalities with it. A NaN anywhere makes the result NaN
/// with the first NaN as sole active index.
#[inline]
fn window_max<T: Real>(x: &[T], offsets: impl Iterator<Item = usize> + Clone, out: &mut ActiveSets) -> T {
    let mut it = offsets.clone();
    let first = it.next().expect("nonempty window");
    let mut best = x[first];
    let mut nan_at = if best.is_nan() { Some(first) } else { None };
    for o in it {
        let v = x[o];
        if v.is_nan() {
            nan_at.get_or_insert(o);
        } else if v > best {
            best = v;
        }
    }
    if let Some(o) = nan_at {
        out.indices.push(o as u32);
        out.close_window();
        return x[o];
    }
    for o in offsets {
        if x[o] == best {
            out.indices.push(o as u32);
        }
    }
    out.close_window();
    best
}

/// Upstream gradient `g` routed onto the active indices of one window.
#[inline]
pub(crate) fn route_window<T: Real>(g: T, active: &[u32], mode: PoolMode, grad_in: &mut [T]) {
    let k = active.len();
    if k == 1 {
        grad_in[active[0] as usize] += g;
        return;
    }
    match mode {
        PoolMode::Native => grad_in[active[0] as usize] += g,
        PoolMode::Minimal => {
            let share = g / T::from_usize(k);
            for &a in active {
                grad_in[a as usize] += share;
            }
        }
        PoolMode::Hybrid(beta) => {
            let b = T::from_f64(beta);
            let share = b * (g / T::from_usize(k));
            // Up to β = 1 the blend form keeps both endpoints exact. Past it
            // the two terms cancel, so the first index takes whatever mass
            // the others leave, which conserves g to within one rounding.
            let first = if beta <= 1.0 {
                (T::ONE - b) * g + share
            } else {
                g - T::from_usize(k - 1) * share
            };
            grad_in[active[0] as usize] += first;
            for &a in &active[1..] {
                grad_in[a as usize] += share;
            }
        }
        PoolMode::NormPoolZero | PoolMode::NormPoolUniform => {
            unreachable!("normpool modes are rejected before routing")
        }
    }
}

/// Planar MaxPool over `planes` stacked `p×q` planes.
pub(crate) fn maxpool_planes<T: Real>(x: &[T], planes: usize, geom: &PoolGeometry) -> (Vec<T>, ActiveSets) {
    let (oh, ow) = geom.output();
    let plane_len = geom.input.0 * geom.input.1;
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut active = ActiveSets::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * plane_len;
        for i in 0..oh {
            for j in 0..ow {
                let offs = geom.window_offsets(i, j).map(move |o| o + base);
                y.push(window_max(x, offs, &mut active));
            }
        }
    }
    (y, active)
}

pub(crate) fn maxpool_backward_planes<T: Real>(grad_out: &[T], active: &ActiveSets, mode: PoolMode, grad_in: &mut [T]) {
    for (w, &g) in grad_out.iter().enumerate() {
        route_window(g, active.get(w), mode, grad_in);
    }
}

fn require_plane<T: Real>(x: &Tensor<T>, geom: &PoolGeometry) -> Result<(), TensorError> {
    if x.shape() != [geom.input.0, geom.input.1] {
        return Err(TensorError::ShapeMismatch {
            op: "pool",
            lhs: x.shape().to_vec(),
            rhs: vec![geom.input.0, geom.input.1],
        });
    }
    Ok(())
}

/// MaxPool of one 2-D plane: window maxima and each window's active set.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>, geom: &PoolGeometry) -> Result<(Tensor<T>, Vec<ActiveSet>), TensorError> {
    require_plane(x, geom)?;
    let (y, act) = maxpool_planes(x.data(), 1, geom);
    let q = geom.input.1;
    let sets = (0..act.windows())
        .map(|w| ActiveSet {
            indices: act.get(w).iter().map(|&o| (o as usize / q, o as usize % q)).collect(),
        })
        .collect();
    let (oh, ow) = geom.output();
    Ok((Tensor::new(vec![oh, ow], y)?, sets))
}

/// Gradient of one MaxPool plane under `mode` (native, minimal or hybrid).
pub fn maxpool_backward<T: Real>(
    grad_out: &Tensor<T>,
    active: &[ActiveSet],
    geom: &PoolGeometry,
    mode: PoolMode,
) -> Result<Tensor<T>, PolicyError> {
    if mode.is_normpool() {
        return Err(PolicyError::Incompatible { mode, op: "maxpool" });
    }
    let q = geom.input.1;
    let mut grad_in = vec![T::ZERO; geom.input.0 * q];
    let mut flat = Vec::new();
    for (set, &g) in active.iter().zip(grad_out.data()) {
        flat.clear();
        flat.extend(set.indices.iter().map(|&(i, j)| (i * q + j) as u32));
        route_window(g, &flat, mode, &mut grad_in);
    }
    Ok(Tensor::from_parts(vec![geom.input.0, q], grad_in))
}

// ---------------------------------------------------------------- NormPool

/// NormPool over stacked planes; returns window norms.
pub(crate) fn normpool_planes<T: Real>(x: &[T], planes: usize, geom: &PoolGeometry) -> Vec<T> {
    let (oh, ow) = geom.output();
    let plane_len = geom.input.0 * geom.input.1;
    let mut y = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * plane_len;
        for i in 0..oh {
            for j in 0..ow {
                // Scaled by the largest entry so that squares of small (or
                // large) values cannot underflow (overflow): the norm is zero
                // exactly when the window is.
                let mut big = T::ZERO;
                for o in geom.window_offsets(i, j) {
                    let a = x[base + o].abs();
                    if a > big {
                        big = a;
                    }
                }
                if big == T::ZERO {
                    y.push(T::ZERO);
                    continue;
                }
                let mut acc = T::ZERO;
                for o in geom.window_offsets(i, j) {
                    let v = x[base + o] / big;
                    acc += v * v;
                }
                y.push(big * acc.sqrt());
            }
        }
    }
    y
}

pub(crate) fn normpool_backward_planes<T: Real>(
    x: &[T],
    norms: &[T],
    grad_out: &[T],
    planes: usize,
    geom: &PoolGeometry,
    mode: PoolMode,
    grad_in: &mut [T],
) -> Result<(), PolicyError> {
    let uniform = match mode {
        PoolMode::NormPoolZero => false,
        PoolMode::NormPoolUniform => true,
        _ => return Err(PolicyError::Incompatible { mode, op: "normpool" }),
    };
    let (oh, ow) = geom.output();
    let plane_len = geom.input.0 * geom.input.1;
    let unit = T::ONE / T::from_usize(geom.window_len()).sqrt();
    let mut w = 0;
    for pl in 0..planes {
        let base = pl * plane_len;
        for i in 0..oh {
            for j in 0..ow {
                let (norm, g) = (norms[w], grad_out[w]);
                w += 1;
                if norm == T::ZERO {
                    if uniform {
                        let d = g * unit;
                        for o in geom.window_offsets(i, j) {
                            grad_in[base + o] += d;
                        }
                    }
                } else {
                    for o in geom.window_offsets(i, j) {
                        grad_in[base + o] += g * (x[base + o] / norm);
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn normpool_forward<T: Real>(x: &Tensor<T>, geom: &PoolGeometry) -> Result<Tensor<T>, TensorError> {
    require_plane(x, geom)?;
    let (oh, ow) = geom.output();
    Tensor::new(vec![oh, ow], normpool_planes(x.data(), 1, geom))
}

pub fn normpool_backward<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &PoolGeometry,
    mode: PoolMode,
) -> Result<Tensor<T>, PolicyError> {
    let norms = normpool_planes(x.data(), 1, geom);
    let mut grad_in = vec![T::ZERO; x.len()];
    normpool_backward_planes(x.data(), &norms, grad_out.data(), 1, geom, mode, &mut grad_in)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), grad_in))
}

// ---------------------------------------------------------------- max via ReLU

/// Derived programs of the three ReLU calls in the ReLU form of `max(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluMaxSlopes {
    /// Slope at 0 of `relu((x − y)/2)`.
    pub first: f64,
    /// Slope at 0 of `relu((y − x)/2)`.
    pub second: f64,
}

/// `max(x, y) = (x + y)/2 + relu((x − y)/2) + relu((y − x)/2)`, each step
/// rounded in the working precision. Returns the value and `(∂/∂x, ∂/∂y)`
/// under the given ReLU slopes at 0.
pub fn max_via_relu<T: Real>(x: T, y: T, slopes: ReluMaxSlopes) -> (T, (T, T)) {
    let half = T::from_f64(0.5);
    let d1 = (x - y) * half;
    let d2 = (y - x) * half;
    let v = (x + y) * half + relu_forward(d1) + relu_forward(d2);
    let s1 = relu_backward(d1, T::from_f64(slopes.first)) * half;
    let s2 = relu_backward(d2, T::from_f64(slopes.second)) * half;
    (v, (half + s1 - s2, half - s1 + s2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::F16;
    use proptest::prelude::*;

    fn plane<T: Real>(rows: usize, cols: usize, v: &[f64]) -> Tensor<T> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn policy_validation() {
        assert!(NonsmoothPolicy::new(0.5, PoolMode::Native).is_ok());
        assert_eq!(
            NonsmoothPolicy::new(1.5, PoolMode::Native).unwrap_err(),
            PolicyError::ReluSlope(1.5)
        );
        assert!(NonsmoothPolicy::new(0.0, PoolMode::Hybrid(-1.0)).is_err());
        assert!(NonsmoothPolicy::new(0.0, PoolMode::Hybrid(1e4)).is_ok());
        assert_eq!("hybrid:2.5".parse::<PoolMode>().unwrap(), PoolMode::Hybrid(2.5));
        assert!("avg".parse::<PoolMode>().is_err());
        for m in [PoolMode::Native, PoolMode::Minimal, PoolMode::Hybrid(3.0), PoolMode::NormPoolZero] {
            assert_eq!(m.to_string().parse::<PoolMode>().unwrap(), m);
        }
    }

    #[test]
    fn relu_derivatives() {
        assert_eq!(relu_backward(-2.0f32, 0.5), 0.0);
        assert_eq!(relu_backward(0.0f32, 1.0), 1.0);
        assert_eq!(relu_backward(-0.0f32, 0.25), 0.25);
        assert_eq!(relu_backward(3.0f32, 0.0), 1.0);
        assert!(relu_backward(f32::NAN, 0.0).is_nan());
        assert_eq!(relu_forward(-1.0f64), 0.0);
    }

    #[test]
    fn tied_window_has_full_active_set() {
        let x = plane::<f32>(2, 2, &[1.4; 4]);
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let (y, act) = maxpool_forward(&x, &g).unwrap();
        assert_eq!(y.data()[0], 1.4f32);
        assert_eq!(act[0].indices, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn unique_max_active_set() {
        let x = plane::<f32>(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let (y, act) = maxpool_forward(&x, &g).unwrap();
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(act[0].indices, vec![(1, 1)]);
    }

    #[test]
    fn worked_example_pool_output() {
        let k = 0.5;
        let z = plane::<f64>(2, 2, &[k, k, 0.0, 0.0]);
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let (y, act) = maxpool_forward(&z, &g).unwrap();
        assert_eq!(y.data()[0], k);
        assert_eq!(act[0].indices, vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn near_ties_are_not_ties() {
        let a = 1.0f32;
        let b = f32::from_bits(a.to_bits() + 1);
        let x = Tensor::new(vec![1, 2], vec![a, b]).unwrap();
        let g = PoolGeometry::new((1, 2), (1, 2)).unwrap();
        let (_, act) = maxpool_forward(&x, &g).unwrap();
        assert_eq!(act[0].indices, vec![(0, 1)]);
    }

    #[test]
    fn nan_window_propagates() {
        let x = plane::<f32>(2, 2, &[1.0, f64::NAN, 3.0, 4.0]);
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let (y, act) = maxpool_forward(&x, &g).unwrap();
        assert!(y.data()[0].is_nan());
        assert_eq!(act[0].indices, vec![(0, 1)]);
    }

    #[test]
    fn geometry_checks() {
        assert!(PoolGeometry::new((3, 3), (2, 4)).is_err());
        let g = PoolGeometry::new((2, 2), (5, 4)).unwrap();
        assert_eq!(g.output(), (2, 2));
        let x = plane::<f32>(4, 4, &[0.0; 16]);
        assert!(maxpool_forward(&x, &g).is_err());
    }

    fn routed(mode: PoolMode, g: f64) -> Vec<f64> {
        let x = plane::<f64>(2, 2, &[1.0; 4]);
        let geom = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let (_, act) = maxpool_forward(&x, &geom).unwrap();
        let go = plane::<f64>(1, 1, &[g]);
        maxpool_backward(&go, &act, &geom, mode).unwrap().to_f64_vec()
    }

    #[test]
    fn routing_modes() {
        assert_eq!(routed(PoolMode::Native, 1.0), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(routed(PoolMode::Minimal, 1.0), vec![0.25; 4]);
        // (1 − 2) + 2/4 on the first index, 2/4 elsewhere.
        assert_eq!(routed(PoolMode::Hybrid(2.0), 1.0), vec![-0.5, 0.5, 0.5, 0.5]);
        assert!(maxpool_backward(
            &plane::<f64>(1, 1, &[1.0]),
            &[ActiveSet { indices: vec![(0, 0)] }],
            &PoolGeometry::new((2, 2), (2, 2)).unwrap(),
            PoolMode::NormPoolZero
        )
        .is_err());
    }

    #[test]
    fn normpool_three_four_five() {
        let x = plane::<f64>(2, 2, &[3.0, 4.0, 0.0, 0.0]);
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let y = normpool_forward(&x, &g).unwrap();
        assert_eq!(y.data()[0], 5.0);
        let go = plane::<f64>(1, 1, &[1.0]);
        let d = normpool_backward(&x, &go, &g, PoolMode::NormPoolZero).unwrap();
        assert_eq!(d.to_f64_vec(), vec![0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn normpool_zero_window_variants() {
        let x = plane::<f32>(2, 2, &[0.0; 4]);
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        let go = plane::<f32>(1, 1, &[1.0]);
        let z = normpool_backward(&x, &go, &g, PoolMode::NormPoolZero).unwrap();
        assert_eq!(z.to_f64_vec(), vec![0.0; 4]);
        let u = normpool_backward(&x, &go, &g, PoolMode::NormPoolUniform).unwrap();
        assert_eq!(u.to_f64_vec(), vec![0.5; 4]);
        assert!(normpool_backward(&x, &go, &g, PoolMode::Native).is_err());
    }

    #[test]
    fn normpool_survives_binary16_underflow_and_overflow() {
        let g = PoolGeometry::new((2, 2), (2, 2)).unwrap();
        // 1e-4 squared is below the smallest binary16 subnormal.
        let tiny = plane::<F16>(2, 2, &[1e-4, 0.0, 0.0, 0.0]);
        let y = normpool_forward(&tiny, &g).unwrap();
        assert_eq!(y.data()[0], tiny.data()[0]);
        let go = plane::<F16>(1, 1, &[1.0]);
        let d = normpool_backward(&tiny, &go, &g, PoolMode::NormPoolUniform).unwrap();
        assert_eq!(d.to_f64_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        // 300 squared exceeds the binary16 range.
        let big = plane::<F16>(2, 2, &[300.0, 400.0, 0.0, 0.0]);
        assert_eq!(normpool_forward(&big, &g).unwrap().data()[0].to_f64(), 500.0);
    }

    #[test]
    fn max_via_relu_matches_max() {
        let slopes = ReluMaxSlopes { first: 0.0, second: 0.0 };
        assert_eq!(max_via_relu(1.0f32, 3.0, slopes).0, 3.0);
        assert_eq!(max_via_relu(5.0f64, -3.0, slopes).0, 5.0);
        let (v, (dx, dy)) = max_via_relu(2.5f64, 2.5, slopes);
        assert_eq!(v, 2.5);
        assert_eq!((dx, dy), (0.5, 0.5));
        let (_, (dx, dy)) = max_via_relu(2.5f64, 2.5, ReluMaxSlopes { first: 1.0, second: 0.0 });
        assert_eq!((dx, dy), (1.0, 0.0));
    }

    /// Squared norm of the convex combination with weights `w` over the
    /// vertices `e_a` (a ∈ A) of the hull.
    fn hull_norm2(w: &[f64]) -> f64 {
        w.iter().map(|x| x * x).sum()
    }

    /// Exhaustive search over the simplex on a 1/12 grid, which contains the
    /// barycenter for every |A| ≤ 4.
    fn brute_force_min_norm(k: usize) -> Vec<f64> {
        fn rec(k: usize, left: usize, cur: &mut Vec<usize>, best: &mut (f64, Vec<f64>)) {
            if cur.len() == k - 1 {
                let mut w: Vec<f64> = cur.iter().map(|&c| c as f64 / 12.0).collect();
                w.push(left as f64 / 12.0);
                let n = hull_norm2(&w);
                if n < best.0 {
                    *best = (n, w);
                }
                return;
            }
            for c in 0..=left {
                cur.push(c);
                rec(k, left - c, cur, best);
                cur.pop();
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(k, 12, &mut Vec::new(), &mut best);
        best.1
    }

    #[test]
    fn minimal_is_min_norm_hull_element() {
        for k in 1..=4 {
            let vals: Vec<f64> = (0..4).map(|i| if i < k { 2.0 } else { 1.0 }).collect();
            let x = plane::<f64>(2, 2, &vals);
            let geom = PoolGeometry::new((2, 2), (2, 2)).unwrap();
            let (_, act) = maxpool_forward(&x, &geom).unwrap();
            let d = maxpool_backward(&plane::<f64>(1, 1, &[1.0]), &act, &geom, PoolMode::Minimal).unwrap();
            let oracle = brute_force_min_norm(k);
            let got: Vec<f64> = d.to_f64_vec()[..k].to_vec();
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-15, "k={k}: {got:?} vs {oracle:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn single_max_windows_agree_across_modes(
            vals in prop::collection::vec(-100i32..100, 16),
            g in prop::collection::vec(-10.0f64..10.0, 4),
            beta in 0.0f64..50.0,
        ) {
            // Distinct values ⇒ every window has a unique maximum.
            let mut vals: Vec<f64> = vals.iter().enumerate().map(|(i, &v)| v as f64 + i as f64 * 1e-3).collect();
            vals.dedup();
            prop_assume!(vals.len() == 16);
            let x = plane::<F16>(4, 4, &vals);
            let geom = PoolGeometry::new((2, 2), (4, 4)).unwrap();
            let (_, act) = maxpool_forward(&x, &geom).unwrap();
            prop_assume!(act.iter().all(|a| a.len() == 1));
            let go = plane::<F16>(2, 2, &g);
            let n = maxpool_backward(&go, &act, &geom, PoolMode::Native).unwrap();
            let m = maxpool_backward(&go, &act, &geom, PoolMode::Minimal).unwrap();
            let h = maxpool_backward(&go, &act, &geom, PoolMode::Hybrid(beta)).unwrap();
            prop_assert!(n.bit_eq(&m));
            prop_assert!(n.bit_eq(&h));
        }

        #[test]
        fn relu_backward_in_selection_set(x in -5.0f32..5.0, s in 0.0f32..=1.0, zero in any::<bool>()) {
            let x = if zero { 0.0 } else { x };
            let d = relu_backward(x, s);
            prop_assert!(d == 0.0 || d == 1.0 || d == s);
        }
    }
}
