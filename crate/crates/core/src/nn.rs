//! Dense feed-forward classifier with hand-written gradients.
//!
//! Each layer computes `z = W x + b`; hidden layers apply a rectifier and the
//! final layer is left linear so the network emits raw logits. Weights are
//! stored row-major with shape `(out_dim, in_dim)`.
//!
//! Gradients are available both for the parameters (training) and for the
//! input image (crafting poison), and are exact up to floating-point rounding.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio;

/// A flattened image whose pixels all lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TensorImage {
    pixels: Vec<f64>,
}

impl TensorImage {
    /// Validates that `pixels` is non-empty, finite and inside the unit box.
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::InvalidArgument("image must have dim >= 1".into()));
        }
        if let Some((i, p)) = pixels
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} = {p} lies outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn clipped(mut pixels: Vec<f64>) -> Self {
        assert!(!pixels.is_empty(), "image must have dim >= 1");
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self { pixels }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::clipped(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Largest absolute pixel difference to `other`.
    pub fn linf_distance(&self, other: &TensorImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for TensorImage {
    type Error = Error;

    fn try_from(pixels: Vec<f64>) -> Result<Self> {
        TensorImage::new(pixels)
    }
}

impl From<TensorImage> for Vec<f64> {
    fn from(image: TensorImage) -> Self {
        image.pixels
    }
}

/// Raw outputs of the final layer, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("logit vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Index of the largest logit. Ties go to the lowest class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = k;
            }
        }
        best
    }

    /// Class indices sorted by decreasing logit (stable, so ties keep index order).
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]));
        order
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &LogitVector) -> Vec<f64> {
    let max = logits.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.values().iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log softmax(z)_y`, computed via log-sum-exp.
pub fn log_softmax_at(logits: &LogitVector, y: usize) -> f64 {
    let max = logits.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .values()
            .iter()
            .map(|&z| (z - max).exp())
            .sum::<f64>()
            .ln();
    logits.get(y) - lse
}

/// One dense layer: `z = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    /// `weights` is row-major `(out_dim, in_dim)`.
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument("layer dims must be > 0".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::Shape(format!(
                "weights have {} entries, expected {out_dim}x{in_dim}",
                weights.len()
            )));
        }
        if biases.len() != out_dim {
            return Err(Error::Shape(format!(
                "biases have {} entries, expected {out_dim}",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
        })
    }

    fn glorot<R: rand::Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite init bound");
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            biases: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.biases
                .iter()
                .enumerate()
                .map(|(r, b)| b + dot(self.row(r), input)),
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of one layer's parameters, shaped like the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients of a scalar loss w.r.t. every parameter and the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub param_grads: Vec<LayerGrads>,
    pub input_grad: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            param_grads: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
            input_grad: vec![0.0; model.input_dim()],
        }
    }

    /// `self += other`, used to accumulate minibatch gradients.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        for (a, b) in self.param_grads.iter_mut().zip(&other.param_grads) {
            add_into(&mut a.weights, &b.weights);
            add_into(&mut a.biases, &b.biases);
        }
        add_into(&mut self.input_grad, &other.input_grad);
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.param_grads {
            g.weights.iter_mut().for_each(|v| *v *= factor);
            g.biases.iter_mut().for_each(|v| *v *= factor);
        }
        self.input_grad.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.param_grads
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.biases))
            .chain(&self.input_grad)
            .all(|v| v.is_finite())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Step-decay learning-rate schedule: `initial_lr * decay_factor^floor(step / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    initial_lr: f64,
    decay_factor: f64,
    decay_every: u64,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_factor: f64, decay_every: u64) -> Result<Self> {
        if !(initial_lr.is_finite() && initial_lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "initial_lr must be positive, got {initial_lr}"
            )));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay_factor must lie in (0, 1], got {decay_factor}"
            )));
        }
        if decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every must be >= 1".into()));
        }
        Ok(Self {
            initial_lr,
            decay_factor,
            decay_every,
        })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(lr, 1.0, 1)
    }

    pub fn initial_lr(&self) -> f64 {
        self.initial_lr
    }

    pub fn decay_factor(&self) -> f64 {
        self.decay_factor
    }

    pub fn decay_every(&self) -> u64 {
        self.decay_every
    }

    /// Same decay strategy, different starting rate.
    pub fn with_initial_lr(&self, initial_lr: f64) -> Result<Self> {
        Self::new(initial_lr, self.decay_factor, self.decay_every)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let periods = step / self.decay_every;
        if self.decay_factor == 1.0 {
            return self.initial_lr;
        }
        self.initial_lr * self.decay_factor.powf(periods as f64)
    }
}

/// Activations recorded during a forward pass: `acts[0]` is the input,
/// `acts[l + 1]` is the output of layer `l` (the last entry holds the logits).
struct Trace {
    acts: Vec<Vec<f64>>,
}

/// The classifier `F_theta`; `forward` exposes the logit function.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    layer_dims: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl MlpModel {
    /// Glorot-uniform weights and zero biases, drawn from a seeded RNG.
    ///
    /// `layer_dims` is `[input, hidden..., classes]` and needs at least two entries.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer::glorot(w[0], w[1], &mut rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer output width {} feeds a layer expecting {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn k_classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, x: &TensorImage) -> Result<()> {
        if x.dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has dim {}, model expects {}",
                x.dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.k_classes() {
            return Err(Error::InvalidLabel {
                label: y,
                k_classes: self.k_classes(),
            });
        }
        Ok(())
    }

    fn trace(&self, input: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.affine(&acts[l], &mut out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        Trace { acts }
    }

    fn logits_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if l != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Raw logits `f(x)`.
    pub fn forward(&self, x: &TensorImage) -> Result<LogitVector> {
        self.check_input(x)?;
        LogitVector::new(self.logits_unchecked(x.pixels()))
    }

    /// Predicted class (lowest index on ties).
    pub fn predict(&self, x: &TensorImage) -> Result<usize> {
        Ok(self.forward(x)?.argmax())
    }

    /// Cross-entropy `-log softmax(f(x))_y`.
    pub fn train_loss(&self, x: &TensorImage, y: usize) -> Result<f64> {
        self.check_label(y)?;
        let logits = self.forward(x)?;
        Ok(-log_softmax_at(&logits, y))
    }

    /// Back-propagates `dlogits` through the recorded trace. Parameter
    /// gradients are only materialized when `params` is set.
    fn backprop(&self, trace: &Trace, dlogits: Vec<f64>, params: bool) -> GradientBundle {
        let mut param_grads = Vec::new();
        let mut delta = dlogits;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[l];
            if params {
                let mut gw = vec![0.0; layer.weights.len()];
                for (r, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &mut gw[r * layer.in_dim..(r + 1) * layer.in_dim];
                        for (g, &a) in row.iter_mut().zip(input) {
                            *g = d * a;
                        }
                    }
                }
                param_grads.push(LayerGrads {
                    weights: gw,
                    biases: delta.clone(),
                });
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (p, &w) in prev.iter_mut().zip(layer.row(r)) {
                        *p += d * w;
                    }
                }
            }
            if l > 0 {
                // rectifier derivative: zero where the unit was inactive
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        param_grads.reverse();
        GradientBundle {
            param_grads,
            input_grad: delta,
        }
    }

    /// Exact gradients of [`train_loss`](Self::train_loss) w.r.t. all parameters and the input.
    pub fn backward(&self, x: &TensorImage, y: usize) -> Result<GradientBundle> {
        Ok(self.loss_and_backward(x, y)?.1)
    }

    /// [`train_loss`](Self::train_loss) and [`backward`](Self::backward) from a single forward pass.
    pub fn loss_and_backward(&self, x: &TensorImage, y: usize) -> Result<(f64, GradientBundle)> {
        self.check_input(x)?;
        self.check_label(y)?;
        let trace = self.trace(x.pixels());
        let logits = LogitVector::new(trace.acts.last().cloned().unwrap_or_default())?;
        let loss = -log_softmax_at(&logits, y);
        let mut dlogits = softmax(&logits);
        dlogits[y] -= 1.0;
        Ok((loss, self.backprop(&trace, dlogits, true)))
    }

    /// Input gradient of `sum_k coeffs[k] * f_k(x)`.
    pub fn backward_logit_combo(&self, x: &TensorImage, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if coeffs.len() != self.k_classes() {
            return Err(Error::Shape(format!(
                "{} logit coefficients for {} classes",
                coeffs.len(),
                self.k_classes()
            )));
        }
        let trace = self.trace(x.pixels());
        Ok(self.backprop(&trace, coeffs.to_vec(), false).input_grad)
    }

    /// In-place SGD update `p <- p - lr * g`. Nothing is modified on error.
    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if grads.param_grads.len() != self.layers.len()
            || self.layers.iter().zip(&grads.param_grads).any(|(l, g)| {
                l.weights.len() != g.weights.len() || l.biases.len() != g.biases.len()
            })
        {
            return Err(Error::Shape("gradient bundle does not match model".into()));
        }
        for (l, g) in grads.param_grads.iter().enumerate() {
            if let Some(i) = g.weights.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of layer {l} weight {i} ({})",
                    g.weights[i]
                )));
            }
            if let Some(i) = g.biases.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of layer {l} bias {i} ({})",
                    g.biases[i]
                )));
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.param_grads) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: self.layer_dims(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weights: l.weights.chunks(l.in_dim).map(<[f64]>::to_vec).collect(),
                    biases: l.biases.clone(),
                })
                .collect(),
        };
        textio::to_string(&ckpt)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = textio::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported format_version {}", ckpt.format_version),
            ));
        }
        validate_dims(&ckpt.layer_dims)?;
        if ckpt.layers.len() + 1 != ckpt.layer_dims.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{} layers listed for layer_dims {:?}",
                    ckpt.layers.len(),
                    ckpt.layer_dims
                ),
            ));
        }
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for (l, (dims, layer)) in ckpt.layer_dims.windows(2).zip(ckpt.layers).enumerate() {
            let (in_dim, out_dim) = (dims[0], dims[1]);
            if layer.weights.len() != out_dim || layer.weights.iter().any(|r| r.len() != in_dim) {
                return Err(Error::format(
                    "checkpoint",
                    format!("layer {l} weights are not {out_dim}x{in_dim}"),
                ));
            }
            let weights = layer.weights.into_iter().flatten().collect();
            layers.push(Layer::new(in_dim, out_dim, weights, layer.biases)?);
        }
        Self::from_layers(layers)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = self.to_checkpoint_string()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer_dims needs input and output widths, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}
