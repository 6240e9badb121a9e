//! One training step and the epoch loop.
//!
//! A step runs the quantized forward pass on the `k1`-shifted batch, forms
//! the four lookahead factors, evaluates the regularizer and applies the
//! backend's gradient correction before a momentum update.

mod metrics;

pub use metrics::{read_jsonl, EpochMetrics, RunMetrics};

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{translate, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{dominance_check, exact_gradient_flow_in_place, weak_gradient_flow_in_place};
use crate::geometry::FactoredLneMetric;
use crate::net::{argmax_rows, backward, batch_nll, forward, save_checkpoint, Backend, Network};
use crate::ricci::{
    regularization_n, rf_condition_layer, Branch, LayerFactors, MetricSnapshot, TranslationSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradBackend {
    Ste,
    Dorefa,
    RfWeak,
    RfExact,
}

impl GradBackend {
    pub fn name(self) -> &'static str {
        match self {
            GradBackend::Ste => "ste",
            GradBackend::Dorefa => "dorefa",
            GradBackend::RfWeak => "rf-weak",
            GradBackend::RfExact => "rf-exact",
        }
    }

    pub fn is_rf(self) -> bool {
        matches!(self, GradBackend::RfWeak | GradBackend::RfExact)
    }
}

impl std::str::FromStr for GradBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ste" => Ok(GradBackend::Ste),
            "dorefa" => Ok(GradBackend::Dorefa),
            "rf-weak" => Ok(GradBackend::RfWeak),
            "rf-exact" => Ok(GradBackend::RfExact),
            _ => Err(Error::Argument(format!(
                "unknown backend '{s}' (ste, dorefa, rf-weak, rf-exact)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSetting {
    /// `1/√n` per layer, `n` the layer's weight count.
    Auto,
    Fixed(f64),
}

impl TauSetting {
    pub fn for_layer(self, num_weights: usize) -> f64 {
        match self {
            TauSetting::Auto => 1.0 / (num_weights as f64).sqrt(),
            TauSetting::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegMode {
    /// `N` is reported but never differentiated.
    Monitor,
    /// `α ∂N/∂W` is added to the task gradient.
    Grad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub backend: GradBackend,
    pub tau: TauSetting,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    /// Zero disables the decay.
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub bits: u32,
    /// Train without any quantizer, using exact gradients.
    pub full_precision: bool,
    pub translations: TranslationSpec,
    pub reg_mode: RegMode,
    pub seed: u64,
    /// Record wall-clock times in the metrics (breaks byte-identical reruns).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backend: GradBackend::Ste,
            tau: TauSetting::Auto,
            alpha: 0.0,
            beta: 1e-3,
            lr: 0.1,
            momentum: 0.9,
            nesterov: false,
            lr_decay: 0.1,
            lr_decay_every: 0,
            epochs: 10,
            batch_size: 64,
            bits: 1,
            full_precision: false,
            translations: TranslationSpec::default(),
            reg_mode: RegMode::Monitor,
            seed: 0,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.bits == 0 || self.bits > 31 {
            return bad(format!("bits must be in 1..=31, got {}", self.bits));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if let TauSetting::Fixed(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("tau must be positive, got {t}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.lr_decay_every) {
            Some(k) => self.lr * self.lr_decay.powi(k as i32),
            None => self.lr,
        }
    }

    fn needs_lookahead(&self) -> bool {
        self.backend.is_rf() || self.alpha > 0.0
    }
}

/// Optimizer state carried between steps.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub velocity: Vec<Array2<f64>>,
    pub previous: Option<MetricSnapshot>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// Task loss plus `α·N` when `N` is available.
    pub loss: f64,
    pub reg_n: Option<f64>,
    pub dominance_violations: usize,
    /// Fraction of weights zeroed by the RF mask; `None` for other backends.
    pub rf_mask_zero_frac: Option<f64>,
}

/// The four shifted copies of a batch, in [`Branch::ALL`] order.
pub fn shifted_batches(
    x: &Array2<f64>,
    image_dims: Option<(usize, usize)>,
    spec: &TranslationSpec,
) -> Result<[Array2<f64>; 4]> {
    let mut out: [Array2<f64>; 4] = Default::default();
    for b in Branch::ALL {
        let (dy, dx) = spec.shift(b);
        out[b.index()] = translate(x, image_dims, dx, dy)?;
    }
    Ok(out)
}

fn check_grad_finite(grads: &[Array2<f64>]) -> Result<()> {
    for (l, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: l,
                detail: "gradient contains NaN or infinity".into(),
            });
        }
    }
    Ok(())
}

fn quantized_backend(net: &Network) -> Backend {
    if net.quant().is_some() {
        Backend::Ste
    } else {
        Backend::Plain
    }
}

/// Factors `tanh(τ (W − η·grad_m))` for every layer of one branch.
fn lookahead_layer_factors(net: &Network, grads: &[Array2<f64>], eta: f64) -> Vec<Vec<f64>> {
    net.layers()
        .iter()
        .zip(grads)
        .map(|(layer, g)| {
            layer
                .weights
                .iter()
                .zip(g.iter())
                .map(|(&w, &gi)| (layer.tau * (w - eta * gi)).tanh())
                .collect()
        })
        .collect()
}

fn snapshot_from_branches(branches: [Vec<Vec<f64>>; 4], time: u64) -> Result<MetricSnapshot> {
    let [mut k1, mut k2, mut j1, mut j2] = branches.map(|b| b.into_iter());
    let layers: Vec<LayerFactors> = (0..k1.len())
        .map(|_| {
            [
                k1.next().expect("same length"),
                k2.next().expect("same length"),
                j1.next().expect("same length"),
                j2.next().expect("same length"),
            ]
        })
        .collect();
    MetricSnapshot::new(layers, time)
}

/// Branch gradients with the straight-through rule, reusing `k1` when given.
fn branch_gradients(
    net: &Network,
    shifted: &[Array2<f64>; 4],
    targets: &[usize],
    k1: Option<&[Array2<f64>]>,
) -> Result<[Vec<Array2<f64>>; 4]> {
    let mut out: [Vec<Array2<f64>>; 4] = Default::default();
    for b in Branch::ALL {
        if let (Branch::K1, Some(g)) = (b, k1) {
            out[b.index()] = g.to_vec();
            continue;
        }
        let cache = forward(net, shifted[b.index()].view(), true)?;
        let (_, d) = batch_nll(cache.logits(), targets)?;
        out[b.index()] = backward(net, &cache, &d, quantized_backend(net))?;
    }
    Ok(out)
}

/// Lookahead factors `u|m = tanh(τ (ξ − η·grad_m))` for the four translated
/// copies of the batch. Weights are not modified.
pub fn lookahead_factors(
    net: &Network,
    x: &Array2<f64>,
    targets: &[usize],
    image_dims: Option<(usize, usize)>,
    spec: &TranslationSpec,
    eta: f64,
    time_index: u64,
) -> Result<MetricSnapshot> {
    if x.nrows() == 0 {
        return Err(Error::Argument("lookahead needs a non-empty batch".into()));
    }
    let shifted = shifted_batches(x, image_dims, spec)?;
    let grads = branch_gradients(net, &shifted, targets, None)?;
    snapshot_from_branches(grads.map(|g| lookahead_layer_factors(net, &g, eta)), time_index)
}

/// `∂N/∂ξ` for one layer, holding the lookahead displacements fixed so that
/// only `u|k1 = tanh(τ(ξ + const))` varies.
///
/// With `G` the Gram matrix of the four factors and `c` the curvature
/// coefficients, `∂N/∂u|k1 = 4 c_k1 Σ_m c_m G_{k1,m} u|m` and
/// `∂u/∂ξ = τ (1 − u²)`.
pub fn reg_gradient(
    snapshot: &MetricSnapshot,
    spec: &TranslationSpec,
    layer: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    if layer >= snapshot.num_layers() {
        return Err(Error::Argument(format!(
            "layer {layer} out of range for {} layers",
            snapshot.num_layers()
        )));
    }
    let f = snapshot.layer(layer);
    let c = spec.curvature_coefficients();
    let k1 = &f[Branch::K1.index()];
    let weights: Vec<f64> = (0..4)
        .map(|m| 4.0 * c[0] * c[m] * crate::geometry::dot(k1, &f[m]))
        .collect();
    Ok((0..k1.len())
        .map(|i| {
            let du: f64 = (0..4).map(|m| weights[m] * f[m][i]).sum();
            du * tau * (1.0 - k1[i] * k1[i])
        })
        .collect())
}

/// One optimization step on a batch. Returns the step's diagnostics.
pub fn train_step(
    net: &mut Network,
    x: &Array2<f64>,
    targets: &[usize],
    image_dims: Option<(usize, usize)>,
    cfg: &TrainConfig,
    lr: f64,
    state: &mut TrainState,
) -> Result<StepMetrics> {
    let spec = cfg.translations;
    let shifted = shifted_batches(x, image_dims, &spec)?;

    // Forward and raw backward on the k1 copy.
    let cache = forward(net, shifted[Branch::K1.index()].view(), true)?;
    let (task_loss, dlogits) = batch_nll(cache.logits(), targets)?;
    let raw = backward(net, &cache, &dlogits, quantized_backend(net))?;
    check_grad_finite(&raw)?;

    let snapshot = if cfg.needs_lookahead() {
        let grads = branch_gradients(net, &shifted, targets, Some(&raw))?;
        Some(snapshot_from_branches(
            grads.map(|g| lookahead_layer_factors(net, &g, lr)),
            state.step,
        )?)
    } else {
        None
    };
    let reg_n = snapshot.as_ref().map(|s| regularization_n(s, &spec));

    let mut grads = raw;
    if let (RegMode::Grad, Some(s)) = (cfg.reg_mode, &snapshot) {
        if cfg.alpha > 0.0 {
            for (l, g) in grads.iter_mut().enumerate() {
                let rg = reg_gradient(s, &spec, l, net.layers()[l].tau)?;
                for (gi, r) in g.iter_mut().zip(&rg) {
                    *gi += cfg.alpha * r;
                }
            }
        }
    }

    let mut dominance_violations = 0;
    let mut zeroed = 0usize;
    let mut total = 0usize;
    match cfg.backend {
        GradBackend::Ste => {}
        GradBackend::Dorefa => {
            for (g, jac) in grads.iter_mut().zip(&cache.prep_jacobian) {
                if let Some(j) = jac {
                    *g *= j;
                }
            }
        }
        GradBackend::RfWeak | GradBackend::RfExact => {
            let current = snapshot.as_ref().expect("rf backends compute the lookahead");
            for (l, g) in grads.iter_mut().enumerate() {
                let layer = &net.layers()[l];
                let u: Vec<f64> = layer.weights.iter().map(|&w| (layer.tau * w).tanh()).collect();
                let flat = g.as_slice_mut().expect("standard layout");
                if cfg.backend == GradBackend::RfWeak {
                    let metric = FactoredLneMetric::from_factor(u, layer.tau)?;
                    if !dominance_check(&metric) {
                        dominance_violations += 1;
                        log::debug!("layer {l}: metric is not diagonally dominant");
                    }
                    weak_gradient_flow_in_place(metric.factor(), flat);
                } else {
                    exact_gradient_flow_in_place(&u, flat)?;
                }
                total += flat.len();
                if let Some(prev) = &state.previous {
                    let mut residual = vec![0.0; flat.len()];
                    rf_condition_layer(
                        prev.layer(l),
                        current.factor(l, Branch::K1),
                        &spec,
                        &mut residual,
                    );
                    for (gi, r) in flat.iter_mut().zip(&residual) {
                        if !(r.abs() <= cfg.beta) {
                            *gi = 0.0;
                            zeroed += 1;
                        }
                    }
                }
            }
        }
    }
    check_grad_finite(&grads)?;

    if state.velocity.len() != grads.len() {
        state.velocity = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
    }
    let mu = cfg.momentum;
    let nesterov = cfg.nesterov;
    for ((layer, v), g) in net.layers_mut().iter_mut().zip(&mut state.velocity).zip(&grads) {
        Zip::from(&mut layer.weights)
            .and(v)
            .and(g)
            .for_each(|w, v, &g| {
                *v = mu * *v + g;
                let step = if nesterov { g + mu * *v } else { *v };
                *w -= lr * step;
            });
    }
    for (l, layer) in net.layers().iter().enumerate() {
        if layer.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric {
                layer: l,
                detail: "weights diverged".into(),
            });
        }
    }

    state.previous = snapshot;
    state.step += 1;
    let loss = task_loss + reg_n.map_or(0.0, |n| cfg.alpha * n);
    Ok(StepMetrics {
        loss,
        reg_n,
        dominance_violations,
        rf_mask_zero_frac: cfg
            .backend
            .is_rf()
            .then(|| if total == 0 { 0.0 } else { zeroed as f64 / total as f64 }),
    })
}

/// Quantized-forward accuracy; ties go to the lowest class index.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    let n = dataset.len();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(CHUNK) {
        let (x, y) = dataset.gather(chunk);
        let cache = forward(net, x.view(), true)?;
        correct += argmax_rows(cache.logits())
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
}

/// Applies the configured `tau` to every layer of `net`.
pub fn apply_tau(net: &mut Network, tau: TauSetting) -> Result<()> {
    net.set_tau(|l| tau.for_layer(l.num_weights()))
}

/// Full epoch loop with seeded shuffling and per-epoch evaluation.
pub fn train_run(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    outputs: &RunOutputs,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if train.num_features() != net.input_dim() || test.num_features() != net.input_dim() {
        return Err(Error::Shape(format!(
            "network expects {} features, datasets have {} and {}",
            net.input_dim(),
            train.num_features(),
            test.num_features()
        )));
    }
    apply_tau(net, cfg.tau)?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut state = TrainState::default();
    let mut metrics = RunMetrics::new(cfg.seed);
    let mut sink = match &outputs.metrics {
        Some(p) => Some(metrics::JsonlSink::create(p)?),
        None => None,
    };

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut reg_seen = false;
        let mut violations = 0;
        let mut mask_sum = 0.0;
        let mut mask_seen = false;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train.gather(batch);
            let m = train_step(net, &x, &y, train.image_dims(), cfg, lr, &mut state)?;
            loss_sum += m.loss;
            if let Some(n) = m.reg_n {
                reg_sum += n;
                reg_seen = true;
            }
            if let Some(f) = m.rf_mask_zero_frac {
                mask_sum += f;
                mask_seen = true;
            }
            violations += m.dominance_violations;
            steps += 1;
        }
        let steps_f = steps.max(1) as f64;
        let record = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / steps_f,
            test_acc: evaluate(net, test)?,
            reg_n: reg_seen.then(|| reg_sum / steps_f),
            dominance_violations: violations,
            rf_mask_zero_frac: mask_seen.then(|| mask_sum / steps_f),
            wall_ms: cfg.timing.then(|| epoch_start.elapsed().as_millis() as u64),
        };
        log::info!(
            "epoch {}: loss {:.4} acc {:.4}",
            record.epoch,
            record.train_loss,
            record.test_acc
        );
        if let Some(s) = sink.as_mut() {
            s.write(&record)?;
        }
        metrics.epochs.push(record);
    }
    if let Some(s) = sink {
        s.finish()?;
    }
    metrics.wall_ms = cfg.timing.then(|| started.elapsed().as_millis() as u64);
    if let Some(p) = &outputs.checkpoint {
        save_checkpoint(net, p, &outputs.config_hash)?;
    }
    Ok(metrics)
}
