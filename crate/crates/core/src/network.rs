//! Layer-list network descriptions, parameter initialization and the
//! recorded forward pass to a softmax cross-entropy loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, NodeId, Reduction, Tape};
use crate::precision::{Precision, Real};
use crate::rng;
use crate::tensor::{ReductionOrder, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Conv2d { out_channels: usize, kernel: usize },
    Pool { window: usize, kind: PoolKind },
    Relu,
    BatchNorm { eps: f64, momentum: f64 },
    Flatten,
    Linear { out: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Weights in `±√(6/fan_in)`.
    KaimingRelu,
    /// Weights in `±1/√fan_in` (leaky slope `a = √5`).
    KaimingLeakySqrt5,
}

impl InitScheme {
    pub fn weight_bound(self, fan_in: usize) -> f64 {
        match self {
            InitScheme::KaimingRelu => (6.0 / fan_in as f64).sqrt(),
            InitScheme::KaimingLeakySqrt5 => 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("layer {index} ({layer}): {msg}")]
    Shape { index: usize, layer: String, msg: String },
    #[error("network output has {got} features, expected {classes} classes")]
    Output { got: usize, classes: usize },
    #[error("parameter set does not match spec: {0}")]
    Params(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Ordered layers ending in logits; the loss is always softmax
/// cross-entropy over `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub init: InitScheme,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeNetOptions {
    pub batchnorm: bool,
    pub pool: PoolKind,
    /// Additional 84-wide hidden layers before the classifier.
    pub extra_hidden: usize,
}

impl Default for LeNetOptions {
    fn default() -> Self {
        LeNetOptions {
            batchnorm: false,
            pool: PoolKind::Max,
            extra_hidden: 0,
        }
    }
}

/// Per-layer shape information derived from a spec.
#[derive(Debug, Clone, PartialEq)]
enum Plan {
    Conv { c_in: usize, out: usize, k: usize, w_param: usize },
    Pool { window: usize, kind: PoolKind },
    Relu,
    BatchNorm { channels: usize, eps: f64, gamma_param: usize, bn_index: usize },
    Flatten { features: usize },
    Linear { fan_in: usize, out: usize, w_param: usize },
}

/// MaxPool commutes with ReLU, so it pools the raw conv output (ties then come
/// from the data, not from clipped zeros). A norm is already nonnegative, so
/// NormPool pools after the ReLU, where all-zero windows actually occur.
fn pool_relu(kind: PoolKind) -> [Layer; 2] {
    let pool = Layer::Pool { window: 2, kind };
    match kind {
        PoolKind::Norm => [Layer::Relu, pool],
        PoolKind::Max => [pool, Layer::Relu],
    }
}

impl NetworkSpec {
    pub fn lenet(opts: LeNetOptions) -> Self {
        let bn = || Layer::BatchNorm {
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        };
        let mut layers = vec![Layer::Conv2d { out_channels: 6, kernel: 5 }];
        if opts.batchnorm {
            layers.push(bn());
        }
        layers.extend(pool_relu(opts.pool));
        layers.push(Layer::Conv2d { out_channels: 16, kernel: 5 });
        if opts.batchnorm {
            layers.push(bn());
        }
        layers.extend(pool_relu(opts.pool));
        layers.extend([
            Layer::Flatten,
            Layer::Linear { out: 120 },
            Layer::Relu,
            Layer::Linear { out: 84 },
            Layer::Relu,
        ]);
        for _ in 0..opts.extra_hidden {
            layers.extend([Layer::Linear { out: 84 }, Layer::Relu]);
        }
        layers.push(Layer::Linear { out: 10 });
        let mut name = String::from("lenet");
        if opts.batchnorm {
            name.push_str("-bn");
        }
        if opts.pool == PoolKind::Norm {
            name.push_str("-normpool");
        }
        if opts.extra_hidden > 0 {
            name.push_str(&format!("-h{}", opts.extra_hidden));
        }
        NetworkSpec {
            name,
            input: (1, 28, 28),
            classes: 10,
            layers,
            init: InitScheme::KaimingRelu,
        }
    }

    /// Fully connected ReLU network on flattened 28×28 inputs.
    pub fn mlp(hidden: &[usize]) -> Self {
        let mut layers = vec![Layer::Flatten];
        for &h in hidden {
            layers.extend([Layer::Linear { out: h }, Layer::Relu]);
        }
        layers.push(Layer::Linear { out: 10 });
        NetworkSpec {
            name: format!("mlp-{}", hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("x")),
            input: (1, 28, 28),
            classes: 10,
            layers,
            init: InitScheme::KaimingRelu,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    fn plan(&self) -> Result<(Vec<Plan>, Vec<ParamInfo>), NetworkError> {
        let (mut c, mut h, mut w) = self.input;
        let mut flat: Option<usize> = None;
        let mut plans = Vec::new();
        let mut params = Vec::new();
        let mut bn_count = 0;
        let (mut n_conv, mut n_lin) = (0, 0);
        for (index, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| NetworkError::Shape {
                index,
                layer: format!("{layer:?}"),
                msg,
            };
            let plan = match *layer {
                Layer::Conv2d { out_channels, kernel } => {
                    if flat.is_some() {
                        return Err(err("convolution after flatten".into()));
                    }
                    if kernel == 0 || kernel > h || kernel > w {
                        return Err(err(format!("kernel {kernel} does not fit {h}×{w}")));
                    }
                    n_conv += 1;
                    let fan_in = c * kernel * kernel;
                    let w_param = params.len();
                    params.push(ParamInfo::weight(format!("conv{n_conv}.weight"), vec![out_channels, c, kernel, kernel], fan_in));
                    params.push(ParamInfo::bias(format!("conv{n_conv}.bias"), vec![out_channels], fan_in));
                    let p = Plan::Conv {
                        c_in: c,
                        out: out_channels,
                        k: kernel,
                        w_param,
                    };
                    c = out_channels;
                    h = h - kernel + 1;
                    w = w - kernel + 1;
                    p
                }
                Layer::Pool { window, kind } => {
                    if flat.is_some() {
                        return Err(err("pooling after flatten".into()));
                    }
                    if window == 0 || window > h || window > w {
                        return Err(err(format!("window {window} does not fit {h}×{w}")));
                    }
                    h /= window;
                    w /= window;
                    Plan::Pool { window, kind }
                }
                Layer::Relu => Plan::Relu,
                Layer::BatchNorm { eps, .. } => {
                    let channels = flat.unwrap_or(c);
                    bn_count += 1;
                    let gamma_param = params.len();
                    params.push(ParamInfo::constant(format!("bn{bn_count}.weight"), vec![channels], 1.0));
                    params.push(ParamInfo::constant(format!("bn{bn_count}.bias"), vec![channels], 0.0));
                    Plan::BatchNorm {
                        channels,
                        eps,
                        gamma_param,
                        bn_index: bn_count - 1,
                    }
                }
                Layer::Flatten => {
                    let features = flat.unwrap_or(c * h * w);
                    flat = Some(features);
                    Plan::Flatten { features }
                }
                Layer::Linear { out } => {
                    let Some(fan_in) = flat else {
                        return Err(err("linear layer needs a preceding flatten".into()));
                    };
                    n_lin += 1;
                    let w_param = params.len();
                    params.push(ParamInfo::weight(format!("fc{n_lin}.weight"), vec![out, fan_in], fan_in));
                    params.push(ParamInfo::bias(format!("fc{n_lin}.bias"), vec![out], fan_in));
                    flat = Some(out);
                    Plan::Linear { fan_in, out, w_param }
                }
            };
            plans.push(plan);
        }
        let got = flat.unwrap_or(c * h * w);
        if flat.is_none() || got != self.classes {
            return Err(NetworkError::Output {
                got,
                classes: self.classes,
            });
        }
        Ok((plans, params))
    }

    /// Checks shape compatibility of the layer chain.
    pub fn validate(&self) -> Result<(), NetworkError> {
        self.plan().map(|_| ())
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> Result<usize, NetworkError> {
        Ok(self.plan()?.1.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
    init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ParamInit {
    Weight(usize),
    Bias(usize),
    Constant(f64),
}

impl ParamInfo {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamInfo {
            name,
            shape,
            init: ParamInit::Weight(fan_in),
        }
    }

    fn bias(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamInfo {
            name,
            shape,
            init: ParamInit::Bias(fan_in),
        }
    }

    fn constant(name: String, shape: Vec<usize>, v: f64) -> Self {
        ParamInfo {
            name,
            shape,
            init: ParamInit::Constant(v),
        }
    }
}

/// Batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
}

/// Named trainable tensors in a fixed order, plus batchnorm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count `p`.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// `‖self − other‖₁` accumulated in binary64.
    pub fn l1_distance(&self, other: &ParameterSet<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
            .sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.data()).map(|v| v.to_f64().abs()).sum()
    }

    pub fn bit_eq(&self, other: &ParameterSet<T>) -> bool {
        self.tensors.len() == other.tensors.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(crate::tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                    momentum: r.momentum,
                })
                .collect(),
        }
    }
}

/// Kaiming-uniform initialization. Each tensor draws from its own seeded
/// stream in binary64 and is rounded once into `T`, so the same seed gives
/// the same θ₀ (up to that rounding) at every precision.
pub fn init_kaiming_uniform<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet<T>, NetworkError> {
    let (plans, infos) = spec.plan()?;
    let mut tensors = Vec::with_capacity(infos.len());
    for (i, info) in infos.iter().enumerate() {
        let n: usize = info.shape.iter().product();
        let mut r = rng::stream(seed, "init", i as u64);
        let data: Vec<f64> = match info.init {
            ParamInit::Weight(fan_in) => {
                let b = spec.init.weight_bound(fan_in);
                (0..n).map(|_| r.gen_range(-b..b)).collect()
            }
            ParamInit::Bias(fan_in) => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| r.gen_range(-b..b)).collect()
            }
            ParamInit::Constant(v) => vec![v; n],
        };
        tensors.push(Tensor::from_f64(&info.shape, &data).expect("planned shape"));
    }
    let running = plans
        .iter()
        .zip(spec.layers.iter())
        .filter_map(|(p, l)| match (p, l) {
            (Plan::BatchNorm { channels, .. }, Layer::BatchNorm { momentum, .. }) => Some(RunningStats {
                mean: vec![T::ZERO; *channels],
                var: vec![T::ONE; *channels],
                momentum: *momentum,
            }),
            _ => None,
        })
        .collect();
    Ok(ParameterSet {
        names: infos.into_iter().map(|p| p.name).collect(),
        tensors,
        running,
    })
}

/// Batchnorm behaviour during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Eval,
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub tape: Tape<T>,
    pub loss: T,
    pub logits: NodeId,
    /// Training-mode batchnorm nodes, in layer order.
    pub batchnorm_nodes: Vec<NodeId>,
}

impl<T: Real> Forward<T> {
    /// Number of examples whose arg-max logit equals the label (first
    /// maximum wins).
    pub fn correct(&self, labels: &[usize]) -> usize {
        let z = self.tape.value(self.logits);
        let c = z.shape()[1];
        z.data()
            .chunks(c)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count()
    }

    /// Folds the batch statistics into the running averages (unbiased
    /// variance, as common frameworks do).
    pub fn update_running(&self, params: &mut ParameterSet<T>) {
        for (node, stats) in self.batchnorm_nodes.iter().zip(params.running.iter_mut()) {
            let Some((mean, var)) = self.tape.batch_stats(*node) else { continue };
            let count = {
                let s = self.tape.value(*node).shape();
                s[0] * s[2..].iter().product::<usize>()
            };
            let m = T::from_f64(stats.momentum);
            let keep = T::ONE - m;
            let unbias = T::from_f64(count as f64 / (count.max(2) - 1) as f64);
            for c in 0..stats.mean.len() {
                stats.mean[c] = keep * stats.mean[c] + m * mean[c];
                stats.var[c] = keep * stats.var[c] + m * (var[c] * unbias);
            }
        }
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Records the forward pass of `spec` on `images: [N,C,H,W]` down to the
/// cross-entropy loss. Parameters become tape leaves in `params` order.
pub fn forward_loss<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    reduction: Reduction,
    order: ReductionOrder,
) -> Result<Forward<T>, NetworkError> {
    let (plans, infos) = spec.plan()?;
    if infos.len() != params.len() || infos.iter().zip(&params.tensors).any(|(i, t)| i.shape != t.shape()) {
        return Err(NetworkError::Params(format!("expected {} tensors for {}", infos.len(), spec.name)));
    }
    let (c, h, w) = spec.input;
    let s = images.shape();
    if s.len() != 4 || s[1..] != [c, h, w] || s[0] == 0 {
        return Err(NetworkError::Params(format!("input batch shape {s:?} does not match {:?}", spec.input)));
    }
    let n = s[0];
    let mut tape = Tape::new(order);
    let leaves: Vec<NodeId> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut x = tape.constant(images.clone());
    let mut batchnorm_nodes = Vec::new();
    for plan in &plans {
        x = match *plan {
            Plan::Conv { w_param, .. } => tape.conv2d(x, leaves[w_param], Some(leaves[w_param + 1]))?,
            Plan::Pool { window, kind } => match kind {
                PoolKind::Max => tape.maxpool(x, (window, window))?,
                PoolKind::Norm => tape.normpool(x, (window, window))?,
            },
            Plan::Relu => tape.relu(x)?,
            Plan::BatchNorm {
                eps,
                gamma_param,
                bn_index,
                ..
            } => {
                let (g, b) = (leaves[gamma_param], leaves[gamma_param + 1]);
                match mode {
                    Mode::Train => {
                        let id = tape.batchnorm(x, g, b, eps)?;
                        batchnorm_nodes.push(id);
                        id
                    }
                    Mode::Eval => {
                        let r = &params.running[bn_index];
                        tape.batchnorm_eval(x, g, b, &r.mean, &r.var, eps)?
                    }
                }
            }
            Plan::Flatten { features } => tape.reshape(x, &[n, features])?,
            Plan::Linear { w_param, .. } => tape.linear(x, leaves[w_param], Some(leaves[w_param + 1]))?,
        };
    }
    let logits = x;
    let loss_id = tape.softmax_xent(logits, labels, reduction)?;
    let loss = tape.value(loss_id).item();
    Ok(Forward {
        tape,
        loss,
        logits,
        batchnorm_nodes,
    })
}

/// Human-readable summary of a spec.
pub fn describe(spec: &NetworkSpec, precision: Precision) -> String {
    let p = spec.param_count().map(|p| p.to_string()).unwrap_or_else(|e| e.to_string());
    format!("{} ({} layers, {} parameters, binary{})", spec.name, spec.layers.len(), p, precision)
}
