//! Mini-batch training with a selectable nonsmooth policy, and the
//! β-sweep / weight-divergence experiments built on it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::data::{Dataset, Normalization};
use crate::network::{forward_loss, init_kaiming_uniform, LeNetOptions, Mode, NetworkError, NetworkSpec, ParameterSet};
use crate::nonsmooth::{NonsmoothPolicy, PoolMode};
use crate::precision::{Precision, Real};
use crate::rng;
use crate::tensor::{ReductionOrder, Tensor};
use crate::with_precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Step size γ.
    pub gamma: f64,
    /// Per-batch learning rate α_q (constant). The effective SGD factor on
    /// the summed batch gradient is `γ·α/|B|`.
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub precision: Precision,
    pub policy: NonsmoothPolicy,
    pub seed: u64,
    /// Keep optimizer arithmetic and state in binary16 when training at
    /// binary16 (otherwise they run in binary32).
    pub strict_b16: bool,
    pub order: ReductionOrder,
    /// A training loss above `divergence_factor ×` the initial loss flags
    /// divergence.
    pub divergence_factor: f64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Sgd,
            gamma: 0.01,
            alpha: 1.0,
            batch_size: 128,
            epochs: 20,
            precision: Precision::B32,
            policy: NonsmoothPolicy::native(),
            seed: 0,
            strict_b16: false,
            order: ReductionOrder::Sequential,
            divergence_factor: 1e3,
            normalization: Normalization::Unit,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of per-batch mean losses.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Mean over steps of `‖Σ_batch backprop‖₁`.
    pub grad_l1: f64,
    pub param_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub initial_loss: f64,
    /// `‖Σ_batch backprop‖₁` at the first step.
    pub initial_grad_l1: f64,
    /// Non-finite loss or loss above the divergence factor; latched.
    pub diverged: bool,
    /// Training stopped on a non-finite value.
    pub halted: bool,
}

impl TrainTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }
}

/// `θ − lr·g`, the per-coordinate SGD update with `lr = γ·α/|B|`.
#[inline]
pub fn sgd_update<S: Real>(theta: S, grad_sum: S, lr: S) -> S {
    theta - lr * grad_sum
}

/// Effective SGD factor on the summed batch gradient.
pub fn sgd_rate(gamma: f64, alpha: f64, batch: usize) -> f64 {
    gamma * alpha / batch as f64
}

/// Adam with bias correction over a list of flat tensors, arithmetic in `S`.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: S,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Real> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, sizes: &[usize]) -> Self {
        Adam {
            lr: S::from_f64(lr),
            beta1,
            beta2,
            eps: S::from_f64(eps),
            m: sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            t: 0,
        }
    }

    /// Advances the step counter; call once per optimizer step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates tensor `k` in place from its (already scaled) gradient.
    pub fn update(&mut self, k: usize, theta: &mut [S], grad: &[S]) {
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.t));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.t));
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (S::ONE - b1) * g;
            v[i] = b2 * v[i] + (S::ONE - b2) * (g * g);
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta[i] = theta[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Applies one optimizer step to `params` from the summed batch gradient,
/// with arithmetic in `S`.
fn apply_step<T: Real, S: Real>(
    cfg: &TrainConfig,
    params: &mut ParameterSet<T>,
    grads: &[Tensor<T>],
    batch: usize,
    adam: &mut Option<Adam<S>>,
) {
    let widen = |xs: &[T]| xs.iter().map(|x| S::from_f64(x.to_f64())).collect::<Vec<S>>();
    let narrow = |xs: Vec<S>| xs.into_iter().map(|x| T::from_f64(x.to_f64())).collect::<Vec<T>>();
    match cfg.optimizer {
        Optimizer::Sgd => {
            let lr = S::from_f64(sgd_rate(cfg.gamma, cfg.alpha, batch));
            for (p, g) in params.tensors.iter_mut().zip(grads) {
                let data: Vec<S> = widen(p.data()).into_iter().zip(widen(g.data())).map(|(th, gv)| sgd_update(th, gv, lr)).collect();
                *p = Tensor::new(p.shape().to_vec(), narrow(data)).expect("same shape");
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let opt = adam.get_or_insert_with(|| {
                let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
                Adam::new(cfg.gamma, beta1, beta2, eps, &sizes)
            });
            opt.tick();
            let scale = S::from_f64(cfg.alpha / batch as f64);
            for (k, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
                let mut theta = widen(p.data());
                let gs: Vec<S> = widen(g.data()).into_iter().map(|x| scale * x).collect();
                opt.update(k, &mut theta, &gs);
                *p = Tensor::new(p.shape().to_vec(), narrow(theta)).expect("same shape");
            }
        }
    }
}

/// Test-set accuracy in evaluation mode.
pub fn evaluate<T: Real>(spec: &NetworkSpec, params: &ParameterSet<T>, test: &Dataset, norm: Normalization) -> Result<f64, NetworkError> {
    if test.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for idx in test.batches(256) {
        let (x, y) = test.batch::<T>(&idx, norm);
        let f = forward_loss(spec, params, &x, &y, Mode::Eval, Reduction::Sum, ReductionOrder::Sequential)?;
        correct += f.correct(&y);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-epoch parameter snapshots requested by callers.
pub type EpochHook<'a, T> = dyn FnMut(usize, &ParameterSet<T>) + 'a;

fn train_with_state<T: Real, S: Real>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mut params: ParameterSet<T>,
    train: &Dataset,
    test: &Dataset,
    hook: &mut EpochHook<'_, T>,
) -> Result<(TrainTrace, ParameterSet<T>), TrainError> {
    let mut trace = TrainTrace {
        epochs: Vec::with_capacity(cfg.epochs),
        initial_loss: f64::NAN,
        initial_grad_l1: f64::NAN,
        diverged: false,
        halted: false,
    };
    let mut adam: Option<Adam<S>> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "epoch-order", epoch as u64));
        let (mut loss_sum, mut grad_sum, mut steps) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch::<T>(idx, cfg.normalization);
            let fwd = forward_loss(spec, &params, &x, &y, Mode::Train, Reduction::Sum, cfg.order)?;
            let loss = fwd.loss.to_f64() / idx.len() as f64;
            if trace.initial_loss.is_nan() {
                trace.initial_loss = loss;
            }
            if !loss.is_finite() {
                trace.diverged = true;
                trace.halted = true;
                break 'epochs;
            }
            let g = fwd.tape.backprop(&cfg.policy, cfg.order).map_err(NetworkError::from)?;
            let gl1 = g.l1_norm();
            if trace.initial_grad_l1.is_nan() {
                trace.initial_grad_l1 = gl1;
            }
            if !gl1.is_finite() {
                trace.diverged = true;
                trace.halted = true;
                break 'epochs;
            }
            fwd.update_running(&mut params);
            apply_step::<T, S>(cfg, &mut params, &g.params, idx.len(), &mut adam);
            loss_sum += loss;
            grad_sum += gl1;
            steps += 1;
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        if train_loss > cfg.divergence_factor * trace.initial_loss {
            trace.diverged = true;
        }
        let param_l1 = params.l1_norm();
        if !param_l1.is_finite() {
            trace.diverged = true;
            trace.halted = true;
        }
        trace.epochs.push(EpochStats {
            epoch,
            train_loss,
            test_accuracy: evaluate(spec, &params, test, cfg.normalization)?,
            grad_l1: grad_sum / steps.max(1) as f64,
            param_l1,
        });
        hook(epoch, &params);
        if trace.halted {
            break;
        }
    }
    Ok((trace, params))
}

/// Trains from `params` at precision `T`.
pub fn train_from<T: Real>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    params: ParameterSet<T>,
    train: &Dataset,
    test: &Dataset,
    hook: &mut EpochHook<'_, T>,
) -> Result<(TrainTrace, ParameterSet<T>), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if T::PRECISION == Precision::B16 && !cfg.strict_b16 {
        train_with_state::<T, f32>(spec, cfg, params, train, test, hook)
    } else {
        train_with_state::<T, T>(spec, cfg, params, train, test, hook)
    }
}

/// Trains a freshly initialized network (seeded by `cfg.seed`).
pub fn train(spec: &NetworkSpec, cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainTrace, TrainError> {
    with_precision!(cfg.precision, T => {
        let p = init_kaiming_uniform::<T>(spec, rng::derive_seed(cfg.seed, "train-init", 0))?;
        Ok(train_from(spec, cfg, p, train, test, &mut |_, _| {})?.0)
    })
}

/// Hybrid MaxPool policy with the given β (β = 0 is Native).
pub fn hybrid_policy(base: NonsmoothPolicy, beta: f64) -> Result<NonsmoothPolicy, TrainError> {
    let mode = PoolMode::hybrid(beta).map_err(|e| TrainError::Config(e.to_string()))?;
    base.with_pool_mode(mode).map_err(|e| TrainError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSeries {
    /// e.g. `"0 vs 10000"`.
    pub label: String,
    pub beta_ref: f64,
    pub beta: f64,
    /// `‖θ_k(β_ref) − θ_k(β)‖₁` per epoch.
    pub l1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDivergence {
    pub betas: Vec<f64>,
    pub traces: Vec<TrainTrace>,
    pub series: Vec<DivergenceSeries>,
}

/// Trains one network per β from a shared θ₀ and batch order, comparing
/// every run against the first β epoch by epoch. The first β is also
/// trained a second time to give a `"β₀ vs β₀"` sanity series.
pub fn weight_divergence(spec: &NetworkSpec, cfg: &TrainConfig, betas: &[f64], train: &Dataset, test: &Dataset) -> Result<WeightDivergence, TrainError> {
    if betas.is_empty() {
        return Err(TrainError::Config("no beta values".into()));
    }
    with_precision!(cfg.precision, T => {
        let theta0 = init_kaiming_uniform::<T>(spec, rng::derive_seed(cfg.seed, "train-init", 0))?;
        let mut runs: Vec<(f64, TrainTrace, Vec<ParameterSet<T>>)> = Vec::new();
        let mut list = vec![betas[0]];
        list.extend_from_slice(betas);
        for &beta in &list {
            let mut c = cfg.clone();
            c.policy = hybrid_policy(cfg.policy, beta)?;
            let mut snaps = Vec::new();
            let (trace, _) = train_from(spec, &c, theta0.clone(), train, test, &mut |_, p| snaps.push(p.clone()))?;
            runs.push((beta, trace, snaps));
        }
        let reference = &runs[0].2;
        let series = runs[1..]
            .iter()
            .map(|(beta, _, snaps)| DivergenceSeries {
                label: format!("{} vs {}", betas[0], beta),
                beta_ref: betas[0],
                beta: *beta,
                l1: reference.iter().zip(snaps).map(|(a, b)| a.l1_distance(b)).collect(),
            })
            .collect();
        Ok(WeightDivergence {
            betas: betas.to_vec(),
            traces: runs.into_iter().skip(1).map(|r| r.1).collect(),
            series,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub precision: Precision,
    pub beta: f64,
    pub batchnorm: bool,
    pub optimizer: String,
    pub final_accuracy: f64,
    pub diverged: bool,
    pub trace: TrainTrace,
}

/// One training run per (precision, β, batchnorm) cell.
pub fn beta_sweep(
    base: LeNetOptions,
    cfg: &TrainConfig,
    precisions: &[Precision],
    betas: &[f64],
    batchnorm: &[bool],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<SweepCell>, TrainError> {
    let mut cells = Vec::new();
    for &precision in precisions {
        for &bn in batchnorm {
            let spec = NetworkSpec::lenet(LeNetOptions { batchnorm: bn, ..base });
            for &beta in betas {
                let mut c = cfg.clone();
                c.precision = precision;
                c.policy = hybrid_policy(cfg.policy, beta)?;
                let trace = self::train(&spec, &c, train, test)?;
                cells.push(SweepCell {
                    precision,
                    beta,
                    batchnorm: bn,
                    optimizer: cfg.optimizer.name().to_string(),
                    final_accuracy: trace.final_accuracy(),
                    diverged: trace.diverged,
                    trace,
                });
            }
        }
    }
    Ok(cells)
}
