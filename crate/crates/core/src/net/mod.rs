//! Dense feed-forward network with a quantized forward path and
//! hand-written reverse mode.
//!
//! Batches are row-major matrices, one sample per row. Layer `i` computes
//!
//! ```text
//! s_i = (â_{i−1} Ŵ_iᵀ) · scale_i,   a_i = f(s_i),   â_i = Q(a_i)
//! ```
//!
//! with `Ŵ_i = Q(W_i)` on the quantized path. The input `a₀` is never
//! quantized and the last layer's `s_l` are the logits. Activation
//! quantization is per sample.

mod checkpoint;

pub use checkpoint::{
    config_hash, load_checkpoint, manifest_path, read_manifest, save_checkpoint, Manifest,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantize::{dorefa_transform, QuantScheme};

/// Flat tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First axis as the batch, remaining axes flattened.
    pub fn to_batch(&self) -> Result<Array2<f64>> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::Shape("scalar tensor has no batch axis".into()))?;
        let cols = self.data.len().checked_div(rows).unwrap_or(0);
        Array2::from_shape_vec((rows, cols), self.data.clone())
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn from_batch(batch: &Array2<f64>) -> Self {
        Self {
            shape: vec![batch.nrows(), batch.ncols()],
            data: batch.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    #[default]
    HardTanh,
    Relu,
}

impl Nonlinearity {
    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::HardTanh => "hard-tanh",
            Nonlinearity::Relu => "relu",
        }
    }

    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Nonlinearity::HardTanh => s.clamp(-1.0, 1.0),
            Nonlinearity::Relu => s.max(0.0),
        }
    }

    /// Derivative, taking the closed side at the kinks.
    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        let inside = match self {
            Nonlinearity::HardTanh => s.abs() <= 1.0,
            Nonlinearity::Relu => s > 0.0,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard-tanh" | "hardtanh" => Ok(Nonlinearity::HardTanh),
            "relu" => Ok(Nonlinearity::Relu),
            _ => Err(Error::Argument(format!("unknown nonlinearity '{s}'"))),
        }
    }
}

/// How full-precision weights are prepared before quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightPrep {
    #[default]
    Direct,
    /// `tanh(W) / max|tanh(W)|`.
    TanhNormalized,
}

impl WeightPrep {
    pub fn name(self) -> &'static str {
        match self {
            WeightPrep::Direct => "direct",
            WeightPrep::TanhNormalized => "tanh-normalized",
        }
    }
}

impl std::str::FromStr for WeightPrep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(WeightPrep::Direct),
            "tanh-normalized" => Ok(WeightPrep::TanhNormalized),
            _ => Err(Error::Argument(format!("unknown weight preparation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub tau: f64,
    pub scale: f64,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, tau: f64, scale: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("tau must be positive, got {tau}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("scale must be positive, got {scale}")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("weights must be finite".into()));
        }
        Ok(Self {
            weights,
            tau,
            scale,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<DenseLayer>,
    nonlinearity: Nonlinearity,
    quant: Option<QuantScheme>,
    weight_prep: WeightPrep,
    /// Changes on every weight mutation so caches can detect staleness.
    version: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.nonlinearity == other.nonlinearity
            && self.quant == other.quant
            && self.weight_prep == other.weight_prep
    }
}

impl Network {
    pub fn new(
        layers: Vec<DenseLayer>,
        nonlinearity: Nonlinearity,
        quant: Option<QuantScheme>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Self {
            layers,
            nonlinearity,
            quant,
            weight_prep: WeightPrep::Direct,
            version: fresh_version(),
        })
    }

    /// Seeded uniform init in `±1/√fan_in`, frozen scale `1/√fan_in`, and
    /// `tau = 1/√n` with `n` the layer's weight count.
    pub fn init(
        sizes: &[usize],
        nonlinearity: Nonlinearity,
        quant: Option<QuantScheme>,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
                let tau = 1.0 / ((fan_in * fan_out) as f64).sqrt();
                DenseLayer::new(weights, tau, bound)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, nonlinearity, quant)
    }

    pub fn with_weight_prep(mut self, prep: WeightPrep) -> Self {
        self.weight_prep = prep;
        self.version = fresh_version();
        self
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Mutable access to the layers. Invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version = fresh_version();
        &mut self.layers
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn quant(&self) -> Option<QuantScheme> {
        self.quant
    }

    pub fn weight_prep(&self) -> WeightPrep {
        self.weight_prep
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn set_tau(&mut self, tau: impl Fn(&DenseLayer) -> f64) -> Result<()> {
        for layer in &mut self.layers {
            let t = tau(layer);
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Domain(format!("tau must be positive, got {t}")));
            }
            layer.tau = t;
        }
        Ok(())
    }

    /// Weights as seen by the quantizer, with the Jacobian of the
    /// preparation step when it is not the identity.
    pub fn prepared_weights(&self, layer: usize) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let w = &self.layers[layer].weights;
        match self.weight_prep {
            WeightPrep::Direct => Ok((w.clone(), None)),
            WeightPrep::TanhNormalized => {
                let (t, jac) = dorefa_transform(w.as_slice().expect("standard layout"))?;
                let shape = w.raw_dim();
                Ok((
                    Array2::from_shape_vec(shape, t).expect("same length"),
                    Some(Array2::from_shape_vec(w.raw_dim(), jac).expect("same length")),
                ))
            }
        }
    }
}

/// Everything backward needs from one forward call.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    version: u64,
    quantized: bool,
    /// Input to each layer: `a₀` for layer 0, `â_{i−1}` afterwards.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activations `s_i`; the last entry holds the logits.
    pub pre: Vec<Array2<f64>>,
    /// `a_i = f(s_i)` for hidden layers.
    pub post: Vec<Array2<f64>>,
    /// Weights before quantization (after any preparation step).
    pub prequant: Vec<Array2<f64>>,
    /// Weights actually used in the product.
    pub used_weights: Vec<Array2<f64>>,
    /// Jacobian of the weight preparation, if any.
    pub prep_jacobian: Vec<Option<Array2<f64>>>,
}

impl ActivationCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }

    pub fn quantized(&self) -> bool {
        self.quantized
    }
}

fn quantize_rows(x: &mut Array2<f64>, q: QuantScheme) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        q.apply_in_place(row.as_slice_mut().expect("standard layout"));
    }
}

fn check_finite(m: &Array2<f64>, layer: usize, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            detail: format!("{what} contains NaN or infinity"),
        })
    }
}

/// Runs the network on a batch. `quantized` has no effect on a network
/// without a quantization scheme.
pub fn forward(net: &Network, input: ArrayView2<f64>, quantized: bool) -> Result<ActivationCache> {
    if input.ncols() != net.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, network expects {}",
            input.ncols(),
            net.input_dim()
        )));
    }
    let q = net.quant.filter(|_| quantized);
    let l = net.layers.len();
    let mut cache = ActivationCache {
        version: net.version,
        quantized: q.is_some(),
        inputs: Vec::with_capacity(l),
        pre: Vec::with_capacity(l),
        post: Vec::with_capacity(l),
        prequant: Vec::with_capacity(l),
        used_weights: Vec::with_capacity(l),
        prep_jacobian: Vec::with_capacity(l),
    };
    let mut current = input.to_owned();
    for (i, layer) in net.layers.iter().enumerate() {
        let (prepared, jac) = if q.is_some() {
            net.prepared_weights(i)?
        } else {
            (layer.weights.clone(), None)
        };
        let used = match q {
            Some(q) => {
                let mut w = prepared.clone();
                q.apply_in_place(w.as_slice_mut().expect("standard layout"));
                w
            }
            None => prepared.clone(),
        };
        let mut s = current.dot(&used.t());
        s *= layer.scale;
        check_finite(&s, i, "pre-activation")?;
        cache.inputs.push(current);
        cache.prequant.push(prepared);
        cache.used_weights.push(used);
        cache.prep_jacobian.push(jac);
        if i + 1 < l {
            let a = s.mapv(|v| net.nonlinearity.apply(v));
            let mut a_hat = a.clone();
            if let Some(q) = q {
                quantize_rows(&mut a_hat, q);
            }
            cache.post.push(a);
            current = a_hat;
        } else {
            current = Array2::zeros((0, 0));
        }
        cache.pre.push(s);
    }
    Ok(cache)
}

/// `−log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn nll_softmax_loss(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Argument(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: 0,
            detail: "logits contain NaN or infinity".into(),
        });
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Mean loss over a batch and the gradient of that mean w.r.t. the logits.
pub fn batch_nll(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let b = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((row, mut g), &t) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(targets) {
        let (loss, d) = nll_softmax_loss(row.as_slice().expect("standard layout"), t)?;
        total += loss;
        for (gi, di) in g.iter_mut().zip(d) {
            *gi = di / b;
        }
    }
    Ok((total / b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Exact reverse mode; quantizers, if cached, pass gradients unchanged.
    Plain,
    /// Straight-through with the `|W| ≤ 1` and `|a| ≤ 1` clip masks.
    Ste,
}

/// Per-layer gradients w.r.t. the weights that entered the quantizer
/// (the prepared weights when a preparation step is active).
pub fn backward(
    net: &Network,
    cache: &ActivationCache,
    dlogits: &Array2<f64>,
    backend: Backend,
) -> Result<Vec<Array2<f64>>> {
    if cache.version != net.version || cache.pre.len() != net.layers.len() {
        return Err(Error::State(
            "cache was produced by a different set of weights".into(),
        ));
    }
    if dlogits.raw_dim() != cache.logits().raw_dim() {
        return Err(Error::Shape(format!(
            "dlogits shape {:?} does not match logits {:?}",
            dlogits.dim(),
            cache.logits().dim()
        )));
    }
    let l = net.layers.len();
    let mut grads = vec![Array2::zeros((0, 0)); l];
    let mut ds = dlogits.clone();
    for i in (0..l).rev() {
        let layer = &net.layers[i];
        let mut gw = ds.t().dot(&cache.inputs[i]);
        gw *= layer.scale;
        if backend == Backend::Ste {
            Zip::from(&mut gw)
                .and(&cache.prequant[i])
                .for_each(|g, &w| {
                    if w.abs() > 1.0 {
                        *g = 0.0;
                    }
                });
        }
        if i > 0 {
            let mut da = ds.dot(&cache.used_weights[i]);
            da *= layer.scale;
            let f = net.nonlinearity;
            let ste = backend == Backend::Ste;
            Zip::from(&mut da)
                .and(&cache.pre[i - 1])
                .and(&cache.post[i - 1])
                .for_each(|d, &s, &a| {
                    let clip = if ste && a.abs() > 1.0 { 0.0 } else { 1.0 };
                    *d *= f.derivative(s) * clip;
                });
            ds = da;
        }
        grads[i] = gw;
    }
    Ok(grads)
}

/// Argmax per row, ties toward the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    fn loss_of(net: &Network, x: &Array2<f64>, y: &[usize]) -> f64 {
        let cache = forward(net, x.view(), false).unwrap();
        batch_nll(cache.logits(), y).unwrap().0
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = t.to_batch().unwrap();
        assert_eq!(b.dim(), (2, 4));
        assert_eq!(b[[1, 0]], 4.0);
        assert_eq!(Tensor::from_batch(&b).data(), t.data());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let layer = DenseLayer::new(Array2::zeros((3, 3)), 1.0, 1.0).unwrap();
        let net = Network::new(vec![layer], Nonlinearity::HardTanh, None).unwrap();
        let cache = forward(&net, random_batch(2, 3, 0).view(), true).unwrap();
        assert!(cache.logits().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incompatible_layers_are_rejected() {
        let a = DenseLayer::new(Array2::zeros((4, 3)), 1.0, 1.0).unwrap();
        let b = DenseLayer::new(Array2::zeros((2, 5)), 1.0, 1.0).unwrap();
        assert!(matches!(
            Network::new(vec![a, b], Nonlinearity::Relu, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn input_shape_mismatch() {
        let net = Network::init(&[4, 3, 2], Nonlinearity::HardTanh, None, 0).unwrap();
        assert!(matches!(
            forward(&net, random_batch(2, 5, 0).view(), false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn nan_input_names_the_layer() {
        let net = Network::init(&[2, 2, 2], Nonlinearity::HardTanh, None, 0).unwrap();
        let x = array![[f64::NAN, 0.0]];
        assert!(matches!(
            forward(&net, x.view(), false),
            Err(Error::Numeric { layer: 0, .. })
        ));
    }

    #[test]
    fn quantized_matches_plain_on_grid_points() {
        let q = QuantScheme::new(3).unwrap();
        let w1 = array![[1.0, -1.0 / 3.0], [0.0, 2.0 / 3.0]];
        let w2 = array![[1.0 / 3.0, -1.0]];
        let net = Network::new(
            vec![
                DenseLayer::new(w1, 1.0, 1.0).unwrap(),
                DenseLayer::new(w2, 1.0, 1.0).unwrap(),
            ],
            Nonlinearity::HardTanh,
            Some(q),
        )
        .unwrap();
        // Hidden pre-activations land on the grid as well.
        let x = array![[1.0 / 3.0, 0.0], [0.0, 1.0]];
        let a = forward(&net, x.view(), true).unwrap();
        let b = forward(&net, x.view(), false).unwrap();
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let net = Network::init(&[3, 4, 2], Nonlinearity::HardTanh, None, 11).unwrap();
        let x = random_batch(5, 3, 1);
        let cache = forward(&net, x.view(), false).unwrap();
        let (w1, w2) = (&net.layers()[0], &net.layers()[1]);
        for r in 0..5 {
            let mut hidden = [0.0; 4];
            for (o, h) in hidden.iter_mut().enumerate() {
                let mut s = 0.0;
                for i in 0..3 {
                    s += w1.weights[[o, i]] * x[[r, i]];
                }
                *h = (s * w1.scale).clamp(-1.0, 1.0);
            }
            for o in 0..2 {
                let mut s = 0.0;
                for (i, h) in hidden.iter().enumerate() {
                    s += w2.weights[[o, i]] * h;
                }
                assert_close!(cache.logits()[[r, o]], s * w2.scale, 1e-14);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::init(&[6, 5, 3], Nonlinearity::Relu, QuantScheme::new(1).ok(), 3).unwrap();
        let x = random_batch(4, 6, 2);
        let a = forward(&net, x.view(), true).unwrap();
        let b = forward(&net, x.view(), true).unwrap();
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn one_bit_activations_are_per_sample() {
        let net = Network::init(&[3, 4, 2], Nonlinearity::HardTanh, QuantScheme::new(1).ok(), 5).unwrap();
        let cache = forward(&net, random_batch(3, 3, 9).view(), true).unwrap();
        for (row, a) in cache.inputs[1].outer_iter().zip(cache.post[0].outer_iter()) {
            let e = a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
            assert!(row.iter().all(|&v| v == e || v == -e));
        }
    }

    #[test]
    fn loss_examples() {
        let (loss, grad) = nll_softmax_loss(&[0.3; 5], 2).unwrap();
        assert_close!(loss, 5f64.ln(), 1e-14);
        assert_close!(grad.iter().sum::<f64>(), 0.0, 1e-15);
        let (loss, _) = nll_softmax_loss(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(matches!(nll_softmax_loss(&[0.0, 1.0], 2), Err(Error::Argument(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = rng.random_range(0..6);
            let (_, grad) = nll_softmax_loss(&z, t).unwrap();
            for k in 0..6 {
                let h = 1e-6;
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let fd = (nll_softmax_loss(&zp, t).unwrap().0 - nll_softmax_loss(&zm, t).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[k]).abs() <= 1e-6 * grad[k].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn plain_backward_matches_finite_differences() {
        for seed in 0..3 {
            let mut net = Network::init(&[4, 5, 3], Nonlinearity::HardTanh, None, seed).unwrap();
            // Enlarge weights so hard-tanh kinks are exercised but avoid
            // sitting on them.
            for layer in net.layers_mut() {
                layer.weights *= 3.0;
            }
            let x = random_batch(6, 4, 100 + seed);
            let y = [0, 1, 2, 0, 1, 2];
            let cache = forward(&net, x.view(), false).unwrap();
            let (_, d) = batch_nll(cache.logits(), &y).unwrap();
            let grads = backward(&net, &cache, &d, Backend::Plain).unwrap();
            let h = 1e-5;
            for (l, grad) in grads.iter().enumerate() {
                let (rows, cols) = net.layers()[l].weights.dim();
                for r in 0..rows {
                    for c in 0..cols {
                        let mut p = net.clone();
                        p.layers_mut()[l].weights[[r, c]] += h;
                        let mut m = net.clone();
                        m.layers_mut()[l].weights[[r, c]] -= h;
                        let fd = (loss_of(&p, &x, &y) - loss_of(&m, &x, &y)) / (2.0 * h);
                        let g = grad[[r, c]];
                        assert!(
                            (fd - g).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-6),
                            "layer {l} ({r},{c}): fd {fd} vs {g}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ste_masks_large_weights() {
        let mut net = Network::init(&[3, 3, 2], Nonlinearity::HardTanh, QuantScheme::new(1).ok(), 1).unwrap();
        net.layers_mut()[0].weights[[1, 2]] = 1.5;
        net.layers_mut()[1].weights[[0, 0]] = -2.0;
        let x = random_batch(4, 3, 3);
        let cache = forward(&net, x.view(), true).unwrap();
        let (_, d) = batch_nll(cache.logits(), &[0, 1, 0, 1]).unwrap();
        let g = backward(&net, &cache, &d, Backend::Ste).unwrap();
        assert_eq!(g[0][[1, 2]], 0.0);
        assert_eq!(g[1][[0, 0]], 0.0);
        let plain = backward(&net, &cache, &d, Backend::Plain).unwrap();
        assert_ne!(plain[1][[0, 0]], 0.0);
    }

    #[test]
    fn ste_equals_plain_inside_clip_region() {
        let net = Network::init(&[4, 6, 3], Nonlinearity::HardTanh, QuantScheme::new(2).ok(), 7).unwrap();
        let x = random_batch(5, 4, 4);
        let cache = forward(&net, x.view(), true).unwrap();
        let (_, d) = batch_nll(cache.logits(), &[0, 1, 2, 0, 1]).unwrap();
        let a = backward(&net, &cache, &d, Backend::Ste).unwrap();
        let b = backward(&net, &cache, &d, Backend::Plain).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Network::init(&[2, 2], Nonlinearity::HardTanh, None, 0).unwrap();
        let cache = forward(&net, random_batch(1, 2, 0).view(), false).unwrap();
        let d = Array2::zeros((1, 2));
        net.layers_mut()[0].weights[[0, 0]] = 0.5;
        assert!(matches!(
            backward(&net, &cache, &d, Backend::Plain),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&array![[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]]), vec![1, 0]);
    }
}
