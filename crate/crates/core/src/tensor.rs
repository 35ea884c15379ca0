//! Dense row-major tensors at a fixed working precision, with explicit
//! control over the order in which reductions accumulate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::precision::Real;
use crate::rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

/// Accumulation order of every sum.
///
/// `Sequential` adds terms in ascending index order. `Shuffled` adds them in a
/// permutation drawn from the seed; the permutation for a given reduction
/// depends only on `(seed, salt, length)`, so a rerun with the same seed is
/// bit-identical while two seeds emulate two nondeterministic device runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ReductionOrder {
    #[default]
    Sequential,
    Shuffled(u64),
}

impl ReductionOrder {
    /// Accumulation order for a reduction of `n` terms at site `salt`, or
    /// `None` for ascending order.
    pub fn permutation(self, n: usize, salt: u64) -> Option<Vec<usize>> {
        match self {
            ReductionOrder::Sequential => None,
            ReductionOrder::Shuffled(seed) => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut r = rng::stream(seed, "reduction-order", rng::mix64(salt) ^ n as u64);
                idx.shuffle(&mut r);
                Some(idx)
            }
        }
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, ReductionOrder::Sequential)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Rounds each `f64` into this precision.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bitwise equality of shape and every stored payload.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bit_eq(*b))
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

/// Rounds every element into the target format (nearest-even, overflow to ±Inf).
pub fn cast<T: Real, U: Real>(t: &Tensor<T>) -> Tensor<U> {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
    }
}

/// Sums a slice in the given order, rounding after each addition.
pub fn sum_ordered<T: Real>(values: &[T], order: ReductionOrder, salt: u64) -> T {
    let mut acc = T::ZERO;
    match order.permutation(values.len(), salt) {
        None => {
            for &v in values {
                acc += v;
            }
        }
        Some(perm) => {
            for i in perm {
                acc += values[i];
            }
        }
    }
    acc
}

pub fn reduce_sum<T: Real>(t: &Tensor<T>, order: ReductionOrder) -> Result<T, TensorError> {
    if t.is_empty() {
        return Err(TensorError::EmptyReduction);
    }
    Ok(sum_ordered(&t.data, order, 0))
}

fn check_same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_same_shape("add", a, b)?;
    Ok(zip_with(a, b, |x, y| x + y))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_same_shape("sub", a, b)?;
    Ok(zip_with(a, b, |x, y| x - y))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_same_shape("mul", a, b)?;
    Ok(zip_with(a, b, |x, y| x * y))
}

pub(crate) fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, order: ReductionOrder) -> Result<Tensor<T>, TensorError> {
    matmul_salted(a, b, order, 0)
}

pub(crate) fn matmul_salted<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    order: ReductionOrder,
    salt: u64,
) -> Result<Tensor<T>, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::ZERO; m * n];
    let perm = order.permutation(k, salt);
    kernels::gemm_acc(m, k, n, &a.data, &b.data, &mut out, perm.as_deref());
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Valid (unpadded), stride-1 2-D convolution (cross-correlation).
///
/// `x` is `[N,C,H,W]` or `[H,W]` (single image, single channel); `w` is
/// `[O,C,KH,KW]` or `[KH,KW]` accordingly. Each output is the inner product
/// over `(c, kh, kw)` accumulated per `order`, then the bias is added.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    order: ReductionOrder,
) -> Result<Tensor<T>, TensorError> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: x.shape.clone(),
        rhs: w.shape.clone(),
    };
    let (x4, w4, plain) = match (x.shape.len(), w.shape.len()) {
        (4, 4) => (x.shape.clone(), w.shape.clone(), false),
        (2, 2) => (
            vec![1, 1, x.shape[0], x.shape[1]],
            vec![1, 1, w.shape[0], w.shape[1]],
            true,
        ),
        _ => return Err(mismatch()),
    };
    let g = kernels::ConvGeom::new(&x4, &w4).ok_or_else(mismatch)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
    }
    let y = kernels::conv_forward(&g, &x.data, &w.data, bias.map(|b| b.data.as_slice()), order, 0);
    let shape = if plain {
        vec![g.oh, g.ow]
    } else {
        vec![g.n, g.o, g.oh, g.ow]
    };
    Ok(Tensor::from_parts(shape, y))
}

/// Inner loops shared by the tensor API and the differentiation tape.
///
/// Matrix products run in i-k-j order: each output element accumulates its
/// terms in the order of the `k` loop, while the innermost loop runs over
/// independent outputs and can be vectorized without reassociating any sum.
pub(crate) mod kernels {
    use super::ReductionOrder;
    use crate::precision::Real;

    /// `c[m×n] += a[m×k] · b[k×n]`, accumulating over `k` in `korder`.
    pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], korder: Option<&[usize]>) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            match korder {
                None => {
                    for (kk, &aik) in arow.iter().enumerate() {
                        axpy(aik, &b[kk * n..(kk + 1) * n], crow);
                    }
                }
                Some(perm) => {
                    for &kk in perm {
                        axpy(arow[kk], &b[kk * n..(kk + 1) * n], crow);
                    }
                }
            }
        }
    }

    #[inline(always)]
    pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = *yi + a * xi;
        }
    }

    /// Transpose of a row-major `[r×c]` matrix.
    pub fn transpose<T: Real>(r: usize, c: usize, a: &[T]) -> Vec<T> {
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct ConvGeom {
        pub n: usize,
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub o: usize,
        pub kh: usize,
        pub kw: usize,
        pub oh: usize,
        pub ow: usize,
    }

    impl ConvGeom {
        pub fn new(x: &[usize], w: &[usize]) -> Option<Self> {
            let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
            let (o, ci, kh, kw) = (w[0], w[1], w[2], w[3]);
            if ci != c || kh > h || kw > wd || kh == 0 || kw == 0 {
                return None;
            }
            Some(ConvGeom {
                n,
                c,
                h,
                w: wd,
                o,
                kh,
                kw,
                oh: h - kh + 1,
                ow: wd - kw + 1,
            })
        }

        /// Patch length `C·KH·KW`.
        pub fn q(&self) -> usize {
            self.c * self.kh * self.kw
        }

        /// Output positions per channel.
        pub fn p(&self) -> usize {
            self.oh * self.ow
        }

        pub fn in_len(&self) -> usize {
            self.c * self.h * self.w
        }
    }

    /// Patch matrix `[Q][P]` of one image.
    pub fn im2col_t<T: Real>(g: &ConvGeom, x: &[T], out: &mut [T]) {
        let p = g.p();
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let q = (c * g.kh + i) * g.kw + j;
                    let row = &mut out[q * p..(q + 1) * p];
                    for y in 0..g.oh {
                        let src = &x[(c * g.h + y + i) * g.w + j..][..g.ow];
                        row[y * g.ow..(y + 1) * g.ow].copy_from_slice(src);
                    }
                }
            }
        }
    }

    /// Patch matrix `[P][Q]` of one image.
    pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], out: &mut [T]) {
        let q_len = g.q();
        for y in 0..g.oh {
            for xx in 0..g.ow {
                let row = &mut out[(y * g.ow + xx) * q_len..][..q_len];
                let mut q = 0;
                for c in 0..g.c {
                    for i in 0..g.kh {
                        let src = &x[(c * g.h + y + i) * g.w + xx..][..g.kw];
                        row[q..q + g.kw].copy_from_slice(src);
                        q += g.kw;
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[Q][P]` patch-gradient matrix back onto one image,
    /// in ascending `(q, p)` order.
    pub fn col2im_t_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
        let p = g.p();
        for c in 0..g.c {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let q = (c * g.kh + i) * g.kw + j;
                    let row = &cols[q * p..(q + 1) * p];
                    for y in 0..g.oh {
                        let dst = &mut dx[(c * g.h + y + i) * g.w + j..][..g.ow];
                        for (d, &s) in dst.iter_mut().zip(&row[y * g.ow..(y + 1) * g.ow]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    pub fn conv_forward<T: Real>(
        g: &ConvGeom,
        x: &[T],
        w: &[T],
        bias: Option<&[T]>,
        order: ReductionOrder,
        salt: u64,
    ) -> Vec<T> {
        let (p, q) = (g.p(), g.q());
        let perm = order.permutation(q, salt);
        let mut y = vec![T::ZERO; g.n * g.o * p];
        let mut cols = vec![T::ZERO; q * p];
        for n in 0..g.n {
            im2col_t(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            let yn = &mut y[n * g.o * p..(n + 1) * g.o * p];
            gemm_acc(g.o, q, p, w, &cols, yn, perm.as_deref());
            if let Some(b) = bias {
                for (o, &bo) in b.iter().enumerate() {
                    for v in &mut yn[o * p..(o + 1) * p] {
                        *v = *v + bo;
                    }
                }
            }
        }
        y
    }
}
