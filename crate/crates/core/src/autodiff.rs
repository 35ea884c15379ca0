//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records a forward evaluation as a sequence of elementary
//! programs, each with its computed value and whatever the backward rule
//! needs (active sets, norms, normalized activations, softmax
//! probabilities). [`Tape::backprop`] walks the tape backwards applying one
//! derived program per node. The nonsmooth selections come from the
//! [`NonsmoothPolicy`] passed at backward time, so one forward pass can be
//! differentiated under several policies and reduction orders.

use crate::nonsmooth::{
    self, maxpool_backward_planes, maxpool_planes, normpool_backward_planes, normpool_planes, ActiveSets,
    NonsmoothPolicy, PolicyError, PoolGeometry, PoolMode,
};
use crate::precision::Real;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{self, sum_ordered, ReductionOrder, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("backprop root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("replay expected {expected} leaf tensors, got {got}")]
    ReplayArity { expected: usize, got: usize },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, T),
    /// Scalar node times tensor node.
    Scale { scalar: usize, x: usize },
    Select { x: usize, index: usize },
    Stack(Vec<usize>),
    Sum(usize),
    Relu { x: usize, slope: Option<f64> },
    /// Max over all elements, as one window.
    Max { x: usize, mode: Option<PoolMode> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    MaxPool { x: usize, geom: PoolGeometry, planes: usize },
    NormPool { x: usize, geom: PoolGeometry, planes: usize },
    Reshape { x: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    BatchNormEval { x: usize, gamma: usize, beta: usize, mean: Vec<T>, var: Vec<T>, eps: f64 },
    SoftmaxXent { logits: usize, labels: Vec<usize>, reduction: Reduction },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale { .. } => "scale",
            Op::Select { .. } => "select",
            Op::Stack(_) => "stack",
            Op::Sum(_) => "sum",
            Op::Relu { .. } => "relu",
            Op::Max { .. } => "max",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool",
            Op::NormPool { .. } => "normpool",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MulConst(a, _) => vec![*a],
            Op::Scale { scalar, x } => vec![*scalar, *x],
            Op::Select { x, .. } | Op::Sum(x) | Op::Relu { x, .. } | Op::Max { x, .. } | Op::Reshape { x } => vec![*x],
            Op::MaxPool { x, .. } | Op::NormPool { x, .. } => vec![*x],
            Op::Stack(ids) => ids.clone(),
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
enum Saved<T> {
    None,
    Active(ActiveSets),
    Norms(Vec<T>),
    Normalized { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Probs(Vec<T>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    saved: Saved<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    order: ReductionOrder,
    params: Vec<usize>,
}

/// Per-parameter gradients, in leaf registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub params: Vec<Tensor<T>>,
    /// A forward value or a gradient entry was NaN.
    pub nan_detected: bool,
}

impl<T: Real> Gradient<T> {
    /// `‖self − other‖₁`, accumulated in binary64.
    pub fn l1_distance(&self, other: &Gradient<T>) -> f64 {
        let mut acc = 0f64;
        for (a, b) in self.params.iter().zip(&other.params) {
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += (x.to_f64() - y.to_f64()).abs();
            }
        }
        acc
    }

    /// `‖self‖₁`, accumulated in binary64.
    pub fn l1_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data().iter())
            .map(|v| v.to_f64().abs())
            .sum()
    }

    pub fn bit_eq(&self, other: &Gradient<T>) -> bool {
        self.params.len() == other.params.len() && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }

    pub fn flatten(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

/// Counts of evaluated points where a nonsmooth primitive is not
/// differentiable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KinkReport {
    pub relu_zeros: usize,
    pub tied_windows: usize,
    pub zero_norm_windows: usize,
}

impl KinkReport {
    pub fn is_smooth(&self) -> bool {
        self.relu_zeros == 0 && self.tied_windows == 0 && self.zero_norm_windows == 0
    }
}

fn salt(id: usize, k: u64) -> u64 {
    ((id as u64) << 4) | k
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Invalid { op, msg: msg.into() }
}

impl<T: Real> Tape<T> {
    pub fn new(order: ReductionOrder) -> Self {
        Tape {
            nodes: Vec::new(),
            order,
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn order(&self) -> ReductionOrder {
        self.order
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of the last recorded node.
    pub fn output(&self) -> &Tensor<T> {
        &self.nodes.last().expect("empty tape").value
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.params.iter().map(|&i| NodeId(i)).collect()
    }

    pub fn param_values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|&i| self.nodes[i].value.clone()).collect()
    }

    pub fn has_nan(&self) -> bool {
        self.nodes.iter().any(|n| n.value.has_nan())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.nodes.len();
        self.params.push(id);
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            saved: Saved::None,
            needs_grad: true,
        });
        NodeId(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            saved: Saved::None,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        let (value, saved) = self.eval(&op, id)?;
        let needs_grad = op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::MulConst(a.0, T::from_f64(c)))
    }

    /// `scalar · x` for a one-element `scalar`.
    pub fn scale(&mut self, scalar: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::Scale { scalar: scalar.0, x: x.0 })
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.push(Op::Select { x: x.0, index })
    }

    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Stack(xs.iter().map(|n| n.0).collect()))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x.0))
    }

    /// ReLU whose derivative at 0 comes from the policy.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu { x: x.0, slope: None })
    }

    /// ReLU with a derived program fixed at record time.
    pub fn relu_with_slope(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&slope) {
            return Err(PolicyError::ReluSlope(slope).into());
        }
        self.push(Op::Relu { x: x.0, slope: Some(slope) })
    }

    /// Maximum over every element of `x`, as a single window.
    pub fn max(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Max { x: x.0, mode: None })
    }

    pub fn max_with_mode(&mut self, x: NodeId, mode: PoolMode) -> Result<NodeId> {
        if mode.is_normpool() {
            return Err(PolicyError::Incompatible { mode, op: "max" }.into());
        }
        self.push(Op::Max { x: x.0, mode: Some(mode) })
    }

    /// Valid stride-1 convolution; `x: [N,C,H,W]`, `w: [O,C,KH,KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch().into());
        }
        let geom = ConvGeom::new(&xs, &ws).ok_or_else(mismatch)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.o {
                return Err(mismatch().into());
            }
        }
        self.push(Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            geom,
        })
    }

    fn pool_geom(&self, x: NodeId, window: (usize, usize)) -> Result<(PoolGeometry, usize)> {
        let s = self.value(x).shape();
        if s.len() < 2 {
            return Err(invalid("pool", format!("needs at least 2 dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        Ok((PoolGeometry::new(window, (h, w))?, planes))
    }

    /// MaxPool over the last two dimensions.
    pub fn maxpool(&mut self, x: NodeId, window: (usize, usize)) -> Result<NodeId> {
        let (geom, planes) = self.pool_geom(x, window)?;
        self.push(Op::MaxPool { x: x.0, geom, planes })
    }

    /// NormPool (window Euclidean norm) over the last two dimensions.
    pub fn normpool(&mut self, x: NodeId, window: (usize, usize)) -> Result<NodeId> {
        let (geom, planes) = self.pool_geom(x, window)?;
        self.push(Op::NormPool { x: x.0, geom, planes })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: v.len(),
            }
            .into());
        }
        let id = self.nodes.len();
        let value = v.clone().reshape(shape)?;
        let needs_grad = self.nodes[x.0].needs_grad;
        self.nodes.push(Node {
            op: Op::Reshape { x: x.0 },
            value,
            saved: Saved::None,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    /// `x·wᵀ + b`; `x: [N,in]`, `w: [out,in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.is_some_and(|b| self.value(b).len() != ws[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            }
            .into());
        }
        self.push(Op::Linear {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
        })
    }

    fn check_bn(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<()> {
        let s = self.value(x).shape();
        if !(s.len() == 2 || s.len() == 4) || self.value(gamma).len() != s[1] || self.value(beta).len() != s[1] {
            return Err(invalid("batchnorm", format!("input {s:?} needs per-channel affine of length {}", s.get(1).unwrap_or(&0))));
        }
        Ok(())
    }

    /// Batch normalization with batch statistics over every axis but 1.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_bn(x, gamma, beta)?;
        self.push(Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            eps,
        })
    }

    /// Batch normalization with fixed statistics.
    pub fn batchnorm_eval(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], var: &[T], eps: f64) -> Result<NodeId> {
        self.check_bn(x, gamma, beta)?;
        if mean.len() != self.value(gamma).len() || var.len() != mean.len() {
            return Err(invalid("batchnorm_eval", "running statistics length mismatch"));
        }
        self.push(Op::BatchNormEval {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
        })
    }

    /// Batch statistics `(mean, biased variance)` saved by a training-mode
    /// batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].saved {
            Saved::Normalized { mean, var, .. } if matches!(self.nodes[id.0].op, Op::BatchNorm { .. }) => Some((mean, var)),
            _ => None,
        }
    }

    /// Softmax cross-entropy of `logits: [N,C]` against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize], reduction: Reduction) -> Result<NodeId> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(invalid("softmax_xent", format!("logits {s:?} vs {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: s[1] });
        }
        self.push(Op::SoftmaxXent {
            logits: logits.0,
            labels: labels.to_vec(),
            reduction,
        })
    }

    /// Softmax probabilities saved by a cross-entropy node.
    pub fn softmax_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].saved {
            Saved::Probs(p) => Some(p),
            _ => None,
        }
    }

    // ------------------------------------------------------------ forward

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn eval(&self, op: &Op<T>, id: usize) -> Result<(Tensor<T>, Saved<T>)> {
        let order = self.order;
        let plain = |t: Tensor<T>| Ok((t, Saved::None));
        match op {
            Op::Leaf | Op::Constant => Err(invalid(op.name(), "not evaluable")),
            Op::Add(a, b) => plain(tensor::add(self.val(*a), self.val(*b))?),
            Op::Sub(a, b) => plain(tensor::sub(self.val(*a), self.val(*b))?),
            Op::Mul(a, b) => plain(tensor::mul(self.val(*a), self.val(*b))?),
            Op::MulConst(a, c) => plain(self.val(*a).map(|v| v * *c)),
            Op::Scale { scalar, x } => {
                let s = self.val(*scalar);
                if s.len() != 1 {
                    return Err(invalid("scale", format!("scalar operand has shape {:?}", s.shape())));
                }
                let s = s.item();
                plain(self.val(*x).map(|v| s * v))
            }
            Op::Select { x, index } => {
                let v = self.val(*x);
                let item = *v
                    .data()
                    .get(*index)
                    .ok_or_else(|| invalid("select", format!("index {index} out of {}", v.len())))?;
                plain(Tensor::scalar(item))
            }
            Op::Stack(ids) => {
                let mut data = Vec::with_capacity(ids.len());
                for &i in ids {
                    let v = self.val(i);
                    if v.len() != 1 {
                        return Err(invalid("stack", "operands must be scalars"));
                    }
                    data.push(v.item());
                }
                plain(Tensor::from_parts(vec![ids.len()], data))
            }
            Op::Sum(x) => {
                let v = self.val(*x);
                if v.is_empty() {
                    return Err(TensorError::EmptyReduction.into());
                }
                plain(Tensor::scalar(sum_ordered(v.data(), order, salt(id, 0))))
            }
            Op::Relu { x, .. } => plain(self.val(*x).map(nonsmooth::relu_forward)),
            Op::Max { x, .. } => {
                let v = self.val(*x);
                if v.is_empty() {
                    return Err(TensorError::EmptyReduction.into());
                }
                let geom = PoolGeometry::new((1, v.len()), (1, v.len()))?;
                let (y, act) = maxpool_planes(v.data(), 1, &geom);
                Ok((Tensor::scalar(y[0]), Saved::Active(act)))
            }
            Op::Conv2d { x, w, b, geom } => {
                let bias = b.map(|b| self.val(b).data());
                let y = kernels::conv_forward(geom, self.val(*x).data(), self.val(*w).data(), bias, order, salt(id, 0));
                plain(Tensor::from_parts(vec![geom.n, geom.o, geom.oh, geom.ow], y))
            }
            Op::MaxPool { x, geom, planes } => {
                let v = self.val(*x);
                let (y, act) = maxpool_planes(v.data(), *planes, geom);
                Ok((Tensor::from_parts(pooled_shape(v.shape(), geom), y), Saved::Active(act)))
            }
            Op::NormPool { x, geom, planes } => {
                let v = self.val(*x);
                let y = normpool_planes(v.data(), *planes, geom);
                Ok((Tensor::from_parts(pooled_shape(v.shape(), geom), y.clone()), Saved::Norms(y)))
            }
            Op::Reshape { .. } => Err(invalid("reshape", "evaluated at record time")),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let wt = kernels::transpose(fout, fin, wv.data());
                let mut y = vec![T::ZERO; n * fout];
                let perm = order.permutation(fin, salt(id, 0));
                kernels::gemm_acc(n, fin, fout, xv.data(), &wt, &mut y, perm.as_deref());
                if let Some(b) = b {
                    let bv = self.val(*b).data();
                    for row in y.chunks_mut(fout) {
                        for (v, &bo) in row.iter_mut().zip(bv) {
                            *v = *v + bo;
                        }
                    }
                }
                plain(Tensor::from_parts(vec![n, fout], y))
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let xv = self.val(*x);
                let lay = ChannelLayout::of(xv.shape());
                let epsv = T::from_f64(*eps);
                let count = T::from_usize(lay.count());
                let mut mean = Vec::with_capacity(lay.c);
                let mut var = Vec::with_capacity(lay.c);
                let mut buf = Vec::with_capacity(lay.count());
                for c in 0..lay.c {
                    lay.gather(xv.data(), c, &mut buf);
                    let m = sum_ordered(&buf, order, salt(id, 1 + 2 * c as u64 % 7)) / count;
                    for v in buf.iter_mut() {
                        let d = *v - m;
                        *v = d * d;
                    }
                    let s2 = sum_ordered(&buf, order, salt(id, 2 + 2 * c as u64 % 7)) / count;
                    mean.push(m);
                    var.push(s2);
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + epsv).sqrt()).collect();
                let (y, xhat) = bn_apply(xv, &lay, &mean, &inv_std, self.val(*gamma).data(), self.val(*beta).data());
                Ok((
                    y,
                    Saved::Normalized {
                        xhat,
                        inv_std,
                        mean,
                        var,
                    },
                ))
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = self.val(*x);
                let lay = ChannelLayout::of(xv.shape());
                let epsv = T::from_f64(*eps);
                let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + epsv).sqrt()).collect();
                let (y, xhat) = bn_apply(xv, &lay, mean, &inv_std, self.val(*gamma).data(), self.val(*beta).data());
                Ok((
                    y,
                    Saved::Normalized {
                        xhat,
                        inv_std,
                        mean: mean.clone(),
                        var: var.clone(),
                    },
                ))
            }
            Op::SoftmaxXent {
                logits,
                labels,
                reduction,
            } => {
                let z = self.val(*logits);
                let c = z.shape()[1];
                let mut probs = Vec::with_capacity(z.len());
                let mut losses = Vec::with_capacity(labels.len());
                let mut e = vec![T::ZERO; c];
                for (n, row) in z.data().chunks(c).enumerate() {
                    let m = row.iter().copied().fold(row[0], |a, b| if b > a || b.is_nan() { b } else { a });
                    for (ei, &zi) in e.iter_mut().zip(row) {
                        *ei = (zi - m).exp();
                    }
                    let s = sum_ordered(&e, order, salt(id, 1));
                    let lse = m + s.ln();
                    losses.push(lse - row[labels[n]]);
                    probs.extend(e.iter().map(|&ei| ei / s));
                }
                let total = sum_ordered(&losses, order, salt(id, 2));
                let loss = match reduction {
                    Reduction::Sum => total,
                    Reduction::Mean => total / T::from_usize(labels.len()),
                };
                Ok((Tensor::scalar(loss), Saved::Probs(probs)))
            }
        }
    }

    /// Re-evaluates the recorded program with new leaf values (in leaf
    /// registration order). With the tape's own leaves this reproduces every
    /// stored value bitwise.
    pub fn replay(&self, leaves: &[Tensor<T>]) -> Result<Tape<T>> {
        self.replay_with_order(leaves, self.order)
    }

    pub fn replay_with_order(&self, leaves: &[Tensor<T>], order: ReductionOrder) -> Result<Tape<T>> {
        if leaves.len() != self.params.len() {
            return Err(AutodiffError::ReplayArity {
                expected: self.params.len(),
                got: leaves.len(),
            });
        }
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            order,
            params: self.params.clone(),
        };
        let mut next_leaf = 0;
        for (id, node) in self.nodes.iter().enumerate() {
            let (value, saved) = match &node.op {
                Op::Leaf => {
                    let v = leaves[next_leaf].clone();
                    next_leaf += 1;
                    if v.shape() != node.value.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "replay leaf",
                            lhs: v.shape().to_vec(),
                            rhs: node.value.shape().to_vec(),
                        }
                        .into());
                    }
                    (v, Saved::None)
                }
                Op::Constant => (node.value.clone(), Saved::None),
                Op::Reshape { x } => (out.nodes[*x].value.clone().reshape(node.value.shape())?, Saved::None),
                op => out.eval(op, id)?,
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                value,
                saved,
                needs_grad: node.needs_grad,
            });
        }
        Ok(out)
    }

    /// Nondifferentiable points hit by this evaluation.
    pub fn kinks(&self) -> KinkReport {
        let mut r = KinkReport::default();
        for node in &self.nodes {
            match (&node.op, &node.saved) {
                (Op::Relu { x, .. }, _) => {
                    r.relu_zeros += self.nodes[*x].value.data().iter().filter(|&&v| v == T::ZERO).count();
                }
                (Op::Max { .. } | Op::MaxPool { .. }, Saved::Active(a)) => r.tied_windows += a.tied_windows(),
                (Op::NormPool { .. }, Saved::Norms(n)) => {
                    r.zero_norm_windows += n.iter().filter(|&&v| v == T::ZERO).count();
                }
                _ => {}
            }
        }
        r
    }

    /// Signature of the activation pattern: ReLU signs and pooling argmax
    /// sets. Two evaluations with equal signatures lie in the same smooth
    /// piece.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match (&node.op, &node.saved) {
                (Op::Relu { x, .. }, _) => {
                    sig.extend(self.nodes[*x].value.data().iter().map(|&v| {
                        if v > T::ZERO {
                            1
                        } else if v < T::ZERO {
                            0
                        } else {
                            2
                        }
                    }));
                }
                (Op::Max { .. } | Op::MaxPool { .. }, Saved::Active(a)) => {
                    for w in 0..a.windows() {
                        sig.push(u32::MAX);
                        sig.extend_from_slice(a.get(w));
                    }
                }
                _ => {}
            }
        }
        sig
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from the last recorded node.
    pub fn backprop(&self, policy: &NonsmoothPolicy, order: ReductionOrder) -> Result<Gradient<T>> {
        if self.nodes.is_empty() {
            return Err(invalid("backprop", "empty tape"));
        }
        self.backprop_from(NodeId(self.nodes.len() - 1), policy, order)
    }

    /// Reverse pass from `root`, which must hold a single value. Gradient
    /// contributions meeting at a node are summed in ascending consumer-id
    /// order (or a seeded permutation of it under `Shuffled`).
    pub fn backprop_from(&self, root: NodeId, policy: &NonsmoothPolicy, order: ReductionOrder) -> Result<Gradient<T>> {
        let root = root.0;
        let rv = &self.nodes[root].value;
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut pending: Vec<Vec<(usize, Tensor<T>)>> = (0..=root).map(|_| Vec::new()).collect();
        pending[root].push((usize::MAX, Tensor::full(rv.shape(), T::ONE)));
        let mut leaf_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad || pending[id].is_empty() {
                continue;
            }
            let contribs = std::mem::take(&mut pending[id]);
            let g = combine(contribs, order, salt(id, 15));
            match &self.nodes[id].op {
                Op::Leaf => leaf_grads[id] = Some(g),
                Op::Constant => {}
                _ => {
                    let mut push = |input: usize, t: Tensor<T>| {
                        if self.nodes[input].needs_grad {
                            pending[input].push((id, t));
                        }
                    };
                    self.vjp(id, g, policy, order, &mut push)?;
                }
            }
        }
        let params: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|&p| leaf_grads[p].take().unwrap_or_else(|| Tensor::zeros(self.nodes[p].value.shape())))
            .collect();
        let nan_detected = self.has_nan() || params.iter().any(|p| p.has_nan());
        Ok(Gradient { params, nan_detected })
    }

    fn vjp(
        &self,
        id: usize,
        g: Tensor<T>,
        policy: &NonsmoothPolicy,
        order: ReductionOrder,
        push: &mut impl FnMut(usize, Tensor<T>),
    ) -> Result<()> {
        let node = &self.nodes[id];
        let needs = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                push(*a, g.clone());
                push(*b, g);
            }
            Op::Sub(a, b) => {
                push(*a, g.clone());
                push(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    push(*a, tensor::zip_with(&g, self.val(*b), |gv, bv| gv * bv));
                }
                if needs(*b) {
                    push(*b, tensor::zip_with(&g, self.val(*a), |gv, av| gv * av));
                }
            }
            Op::MulConst(a, c) => push(*a, g.map(|v| v * *c)),
            Op::Scale { scalar, x } => {
                let s = self.val(*scalar).item();
                if needs(*x) {
                    push(*x, g.map(|v| v * s));
                }
                if needs(*scalar) {
                    let prods: Vec<T> = g.data().iter().zip(self.val(*x).data()).map(|(&gv, &xv)| gv * xv).collect();
                    let gs = sum_ordered(&prods, order, salt(id, 1));
                    push(*scalar, Tensor::full(self.val(*scalar).shape(), gs));
                }
            }
            Op::Select { x, index } => {
                let mut gx = Tensor::zeros(self.val(*x).shape());
                gx.data_mut()[*index] = g.item();
                push(*x, gx);
            }
            Op::Stack(ids) => {
                for (k, &i) in ids.iter().enumerate() {
                    push(i, Tensor::full(self.val(i).shape(), g.data()[k]));
                }
            }
            Op::Sum(x) => push(*x, Tensor::full(self.val(*x).shape(), g.item())),
            Op::Relu { x, slope } => {
                let s = T::from_f64(slope.unwrap_or(policy.relu_s()));
                push(*x, tensor::zip_with(&g, self.val(*x), |gv, xv| gv * nonsmooth::relu_backward(xv, s)));
            }
            Op::Max { x, mode } => {
                let mode = mode.unwrap_or(policy.pool_mode());
                if mode.is_normpool() {
                    return Err(PolicyError::Incompatible { mode, op: "max" }.into());
                }
                let Saved::Active(act) = &node.saved else { unreachable!() };
                let mut gx = Tensor::zeros(self.val(*x).shape());
                maxpool_backward_planes(g.data(), act, mode, gx.data_mut());
                push(*x, gx);
            }
            Op::MaxPool { x, .. } => {
                let mode = policy.pool_mode();
                if mode.is_normpool() {
                    return Err(PolicyError::Incompatible { mode, op: "maxpool" }.into());
                }
                let Saved::Active(act) = &node.saved else { unreachable!() };
                let mut gx = Tensor::zeros(self.val(*x).shape());
                maxpool_backward_planes(g.data(), act, mode, gx.data_mut());
                push(*x, gx);
            }
            Op::NormPool { x, geom, planes } => {
                let Saved::Norms(norms) = &node.saved else { unreachable!() };
                let xv = self.val(*x);
                let mut gx = Tensor::zeros(xv.shape());
                normpool_backward_planes(xv.data(), norms, g.data(), *planes, geom, policy.pool_mode(), gx.data_mut())?;
                push(*x, gx);
            }
            Op::Reshape { x } => push(*x, g.reshape(self.val(*x).shape())?),
            Op::Conv2d { x, w, b, geom } => self.conv_vjp(id, &g, *x, *w, *b, geom, order, push),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                let gd = g.data();
                if needs(*w) {
                    let gt = kernels::transpose(n, fout, gd);
                    let mut gw = vec![T::ZERO; fout * fin];
                    let perm = order.permutation(n, salt(id, 1));
                    kernels::gemm_acc(fout, n, fin, &gt, xv.data(), &mut gw, perm.as_deref());
                    push(*w, Tensor::from_parts(vec![fout, fin], gw));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let gb = column_sums(gd, n, fout, order, salt(id, 2));
                    push(b, Tensor::from_parts(self.val(b).shape().to_vec(), gb));
                }
                if needs(*x) {
                    let mut gx = vec![T::ZERO; n * fin];
                    let perm = order.permutation(fout, salt(id, 3));
                    kernels::gemm_acc(n, fout, fin, gd, wv.data(), &mut gx, perm.as_deref());
                    push(*x, Tensor::from_parts(vec![n, fin], gx));
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                let training = matches!(node.op, Op::BatchNorm { .. });
                let Saved::Normalized { xhat, inv_std, .. } = &node.saved else { unreachable!() };
                let xv = self.val(*x);
                let lay = ChannelLayout::of(xv.shape());
                let gam = self.val(*gamma).data();
                let count = T::from_usize(lay.count());
                let mut dgamma = Vec::with_capacity(lay.c);
                let mut dbeta = Vec::with_capacity(lay.c);
                let mut gx = vec![T::ZERO; xv.len()];
                let (mut gb, mut xb, mut prod) = (Vec::new(), Vec::new(), Vec::new());
                for c in 0..lay.c {
                    lay.gather(g.data(), c, &mut gb);
                    lay.gather(xhat, c, &mut xb);
                    prod.clear();
                    prod.extend(gb.iter().zip(&xb).map(|(&a, &b)| a * b));
                    let sum_g = sum_ordered(&gb, order, salt(id, 1));
                    let sum_gx = sum_ordered(&prod, order, salt(id, 2));
                    dbeta.push(sum_g);
                    dgamma.push(sum_gx);
                    if needs(*x) {
                        let k = gam[c] * inv_std[c];
                        let vals: Vec<T> = if training {
                            // dx = γ·σ⁻¹/M · (M·g − Σg − x̂·Σ(g·x̂))
                            let scale = k / count;
                            gb.iter()
                                .zip(&xb)
                                .map(|(&gv, &xh)| scale * (count * gv - sum_g - xh * sum_gx))
                                .collect()
                        } else {
                            gb.iter().map(|&gv| k * gv).collect()
                        };
                        lay.scatter(&vals, c, &mut gx);
                    }
                }
                if needs(*gamma) {
                    push(*gamma, Tensor::from_parts(self.val(*gamma).shape().to_vec(), dgamma));
                }
                if needs(*beta) {
                    push(*beta, Tensor::from_parts(self.val(*beta).shape().to_vec(), dbeta));
                }
                if needs(*x) {
                    push(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                reduction,
            } => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let c = self.val(*logits).shape()[1];
                let scale = match reduction {
                    Reduction::Sum => g.item(),
                    Reduction::Mean => g.item() / T::from_usize(labels.len()),
                };
                let mut gl = p.clone();
                for (n, row) in gl.chunks_mut(c).enumerate() {
                    row[labels[n]] = row[labels[n]] - T::ONE;
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                push(*logits, Tensor::from_parts(vec![labels.len(), c], gl));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_vjp(
        &self,
        id: usize,
        g: &Tensor<T>,
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        order: ReductionOrder,
        push: &mut impl FnMut(usize, Tensor<T>),
    ) {
        let (p, q) = (geom.p(), geom.q());
        let (xv, wv) = (self.val(x), self.val(w));
        let gd = g.data();
        let per_out = geom.o * p;
        if self.nodes[w].needs_grad {
            let mut gw = vec![T::ZERO; geom.o * q];
            match order.permutation(geom.n * p, salt(id, 1)) {
                None => {
                    let mut cols = vec![T::ZERO; p * q];
                    for n in 0..geom.n {
                        kernels::im2col(geom, &xv.data()[n * geom.in_len()..(n + 1) * geom.in_len()], &mut cols);
                        kernels::gemm_acc(geom.o, p, q, &gd[n * per_out..(n + 1) * per_out], &cols, &mut gw, None);
                    }
                }
                Some(perm) => {
                    let np = geom.n * p;
                    let mut cols = vec![T::ZERO; np * q];
                    let mut gt = vec![T::ZERO; geom.o * np];
                    for n in 0..geom.n {
                        kernels::im2col(
                            geom,
                            &xv.data()[n * geom.in_len()..(n + 1) * geom.in_len()],
                            &mut cols[n * p * q..(n + 1) * p * q],
                        );
                        for o in 0..geom.o {
                            gt[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(&gd[n * per_out + o * p..n * per_out + (o + 1) * p]);
                        }
                    }
                    kernels::gemm_acc(geom.o, np, q, &gt, &cols, &mut gw, Some(&perm));
                }
            }
            push(w, Tensor::from_parts(wv.shape().to_vec(), gw));
        }
        if let Some(b) = b.filter(|&b| self.nodes[b].needs_grad) {
            let mut gb = Vec::with_capacity(geom.o);
            let mut buf = Vec::with_capacity(geom.n * p);
            for o in 0..geom.o {
                buf.clear();
                for n in 0..geom.n {
                    buf.extend_from_slice(&gd[n * per_out + o * p..n * per_out + (o + 1) * p]);
                }
                gb.push(sum_ordered(&buf, order, salt(id, 2)));
            }
            push(b, Tensor::from_parts(self.val(b).shape().to_vec(), gb));
        }
        if self.nodes[x].needs_grad {
            let wt = kernels::transpose(geom.o, q, wv.data());
            let perm = order.permutation(geom.o, salt(id, 3));
            let mut gx = vec![T::ZERO; geom.n * geom.in_len()];
            let mut dcols = vec![T::ZERO; q * p];
            for n in 0..geom.n {
                dcols.iter_mut().for_each(|v| *v = T::ZERO);
                kernels::gemm_acc(q, geom.o, p, &wt, &gd[n * per_out..(n + 1) * per_out], &mut dcols, perm.as_deref());
                kernels::col2im_t_add(geom, &dcols, &mut gx[n * geom.in_len()..(n + 1) * geom.in_len()]);
            }
            push(x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
    }
}

fn pooled_shape(shape: &[usize], geom: &PoolGeometry) -> Vec<usize> {
    let mut s = shape[..shape.len() - 2].to_vec();
    let (oh, ow) = geom.output();
    s.push(oh);
    s.push(ow);
    s
}

fn combine<T: Real>(mut contribs: Vec<(usize, Tensor<T>)>, order: ReductionOrder, salt: u64) -> Tensor<T> {
    if contribs.len() == 1 {
        return contribs.pop().unwrap().1;
    }
    contribs.sort_by_key(|(consumer, _)| *consumer);
    if let Some(perm) = order.permutation(contribs.len(), salt) {
        let mut slots: Vec<Option<Tensor<T>>> = contribs.into_iter().map(|(_, t)| Some(t)).collect();
        contribs = perm.iter().map(|&i| (i, slots[i].take().unwrap())).collect();
    }
    let mut it = contribs.into_iter().map(|(_, t)| t);
    let mut acc = it.next().unwrap();
    for t in it {
        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += b;
        }
    }
    acc
}

/// Column sums of a row-major `[rows×cols]` matrix.
fn column_sums<T: Real>(m: &[T], rows: usize, cols: usize, order: ReductionOrder, salt: u64) -> Vec<T> {
    match order.permutation(rows, salt) {
        None => {
            let mut acc = vec![T::ZERO; cols];
            for row in m.chunks(cols) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc
        }
        Some(perm) => {
            let mut acc = vec![T::ZERO; cols];
            for r in perm {
                for (a, &v) in acc.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                    *a += v;
                }
            }
            acc
        }
    }
}

/// Index arithmetic for per-channel statistics of `[N,C]` or `[N,C,H,W]`.
struct ChannelLayout {
    n: usize,
    c: usize,
    hw: usize,
}

impl ChannelLayout {
    fn of(shape: &[usize]) -> Self {
        ChannelLayout {
            n: shape[0],
            c: shape[1],
            hw: shape[2..].iter().product(),
        }
    }

    fn count(&self) -> usize {
        self.n * self.hw
    }

    /// Channel `c` values in ascending `(n, hw)` order.
    fn gather<T: Real>(&self, src: &[T], c: usize, out: &mut Vec<T>) {
        out.clear();
        for n in 0..self.n {
            let base = (n * self.c + c) * self.hw;
            out.extend_from_slice(&src[base..base + self.hw]);
        }
    }

    fn scatter<T: Real>(&self, vals: &[T], c: usize, dst: &mut [T]) {
        for n in 0..self.n {
            let base = (n * self.c + c) * self.hw;
            dst[base..base + self.hw].copy_from_slice(&vals[n * self.hw..(n + 1) * self.hw]);
        }
    }
}

fn bn_apply<T: Real>(
    x: &Tensor<T>,
    lay: &ChannelLayout,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Vec<T>) {
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    for n in 0..lay.n {
        for c in 0..lay.c {
            let base = (n * lay.c + c) * lay.hw;
            for i in base..base + lay.hw {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), y), xhat)
}

// ---------------------------------------------------------------- grad check

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Gradients smaller than this are compared on an absolute scale:
    /// the denominator of the relative error is `max(|bp|, |fd|, floor)`.
    pub floor: f64,
    /// Upper bound on checked coordinates per parameter tensor (evenly
    /// strided when the tensor is larger).
    pub max_coords_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-6,
            tol: 1e-5,
            floor: 1e-4,
            max_coords_per_param: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±h perturbation changed the activation pattern.
    pub skipped_kink: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Set when the evaluation point itself is nondifferentiable.
    pub note: Option<String>,
}

/// Compares backprop against central differences of the replayed program.
pub fn grad_check<T: Real>(tape: &Tape<T>, policy: &NonsmoothPolicy, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let kinks = tape.kinks();
    if !kinks.is_smooth() {
        return Ok(GradCheckReport {
            checked: 0,
            skipped_kink: 0,
            max_rel_error: 0.0,
            passed: true,
            note: Some(format!("nonsmooth point, check skipped ({kinks:?})")),
        });
    }
    let bp = tape.backprop(policy, tape.order())?;
    let base = tape.param_values();
    let pattern = tape.activation_pattern();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kink: 0,
        max_rel_error: 0.0,
        passed: true,
        note: None,
    };
    for (pi, param) in base.iter().enumerate() {
        let len = param.len();
        let stride = len.div_ceil(cfg.max_coords_per_param).max(1);
        for idx in (0..len).step_by(stride) {
            let eval = |delta: f64| -> Result<(f64, bool)> {
                let mut leaves = base.clone();
                let mut data = leaves[pi].clone().into_data();
                data[idx] = T::from_f64(data[idx].to_f64() + delta);
                leaves[pi] = Tensor::from_parts(param.shape().to_vec(), data);
                let t = tape.replay(&leaves)?;
                Ok((t.output().item().to_f64(), t.activation_pattern() == pattern))
            };
            let (lp, same_p) = eval(cfg.h)?;
            let (lm, same_m) = eval(-cfg.h)?;
            if !(same_p && same_m) {
                report.skipped_kink += 1;
                continue;
            }
            // Actual step after rounding θ ± h into the working precision.
            let x0 = param.data()[idx].to_f64();
            let step = T::from_f64(x0 + cfg.h).to_f64() - T::from_f64(x0 - cfg.h).to_f64();
            let fd = (lp - lm) / step;
            let b = bp.params[pi].data()[idx].to_f64();
            let rel = (b - fd).abs() / b.abs().max(fd.abs()).max(cfg.floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}
