//! Feed-forward classifier with analytic gradients and layer freezing.
//!
//! Weights of layer `l` are stored as a `fan_in x fan_out` matrix so a batch
//! `X` (rows = samples) maps to `X W + b`. Hidden layers use the configured
//! activation; the output layer produces raw logits scored by softmax
//! cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("tensor contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// New tensor made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `self * rhs`
    fn matmul(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.cols, rhs.rows);
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let r = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o.iter_mut().zip(r) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * rhs`
    fn t_matmul(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.rows, rhs.rows);
        let mut out = Self::zeros(self.cols, rhs.cols);
        for n in 0..self.rows {
            let a_row = self.row(n);
            let b_row = rhs.row(n);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in o.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhs^T`
    fn matmul_t(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.cols, rhs.cols);
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("model.n_classes must be >= 2".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.n_classes);
        d
    }
}

/// One affine layer. Also used as the gradient container for that layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Tensor2D,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.rows
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Tensor2D::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.fan_in(), self.fan_out())
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.weights.same_shape(&other.weights) && self.bias.len() == other.bias.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.data.iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.data.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model parameters, layer by layer, with a per-layer freeze mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredParams {
    layers: Vec<Layer>,
    freeze_mask: Vec<bool>,
    activation: Activation,
}

impl LayeredParams {
    pub fn new(layers: Vec<Layer>, freeze_mask: Vec<bool>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if freeze_mask.len() != layers.len() {
            return Err(Error::Shape(format!(
                "freeze mask has {} entries for {} layers",
                freeze_mask.len(),
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape(format!("layer {i}: bias length != fan_out")));
            }
            if l.fan_in() == 0 || l.fan_out() == 0 {
                return Err(Error::Shape(format!("layer {i}: empty dimension")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    w[0].fan_out(),
                    i + 1,
                    w[1].fan_in()
                )));
            }
        }
        Ok(Self {
            layers,
            freeze_mask,
            activation,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn freeze_mask(&self) -> &[bool] {
        &self.freeze_mask
    }

    pub fn set_freeze_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "freeze mask has {} entries for {} layers",
                mask.len(),
                self.layers.len()
            )));
        }
        self.freeze_mask = mask;
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        for (dst, &src) in self.layers.iter_mut().flat_map(Layer::values_mut).zip(flat) {
            *dst = src;
        }
        Ok(())
    }
}

/// Per-layer gradients mirroring a [`LayeredParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &LayeredParams) -> Self {
        Self {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().flat_map(Layer::values).map(|v| v * v).sum()
    }

    /// Squared Euclidean distance; panics on shape mismatch.
    pub fn distance_sq(&self, other: &Self) -> f64 {
        assert!(self.matches(other), "gradient shapes differ");
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.values().zip(b.values()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Euclidean inner product; panics on shape mismatch.
    pub fn dot(&self, other: &Self) -> f64 {
        assert!(self.matches(other), "gradient shapes differ");
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.values().zip(b.values()))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn matches(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn matches_params(&self, params: &LayeredParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(Layer::values).all(|v| v.is_finite())
    }
}

/// A transformation applied to the first hidden-layer activation during the
/// forward pass, with the matching vector-Jacobian product for backprop.
pub trait FeatureTransform {
    fn forward(&mut self, z: &Tensor2D) -> Tensor2D;
    /// Map the gradient with respect to the transformed features back to the
    /// raw features of the most recent `forward` call.
    fn backward(&self, grad: &Tensor2D) -> Tensor2D;
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization. The first layer
/// is frozen by default when the network has more than one layer.
pub fn init_params(config: &MlpConfig, seed: u64) -> Result<LayeredParams> {
    config.validate()?;
    let dims = config.dims();
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(seed, "init", &[l as u64]);
        let weights = (0..fan_in * fan_out)
            .map(|_| r.random_range(-bound..=bound))
            .collect();
        let bias = (0..fan_out).map(|_| r.random_range(-bound..=bound)).collect();
        layers.push(Layer {
            weights: Tensor2D {
                rows: fan_in,
                cols: fan_out,
                data: weights,
            },
            bias,
        });
    }
    let n = layers.len();
    let freeze_mask = (0..n).map(|i| i == 0 && n > 1).collect();
    LayeredParams::new(layers, freeze_mask, config.activation)
}

/// Intermediate values kept from a forward pass for backpropagation.
pub struct ForwardCache {
    /// Input fed to each layer (after activation and feature transform).
    inputs: Vec<Tensor2D>,
    /// Pre-activation output of each layer; the last entry holds the logits.
    pre: Vec<Tensor2D>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor2D {
        self.pre.last().expect("at least one layer")
    }

    /// Input seen by the layer at `layer` (index 0 is the raw input).
    pub fn layer_input(&self, layer: usize) -> &Tensor2D {
        &self.inputs[layer]
    }
}

fn check_input(params: &LayeredParams, x: &Tensor2D) -> Result<()> {
    if x.cols != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            x.cols,
            params.input_dim()
        )));
    }
    Ok(())
}

pub fn forward_cached(
    params: &LayeredParams,
    x: &Tensor2D,
    mut transform: Option<&mut dyn FeatureTransform>,
) -> Result<ForwardCache> {
    check_input(params, x)?;
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut a = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = a.matmul(&layer.weights);
        for r in 0..z.rows {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        inputs.push(a);
        if l + 1 < n {
            let mut act = z.clone();
            act.data.iter_mut().for_each(|v| *v = params.activation.apply(*v));
            if l == 0 {
                if let Some(t) = transform.as_deref_mut() {
                    act = t.forward(&act);
                }
            }
            a = act;
        } else {
            a = Tensor2D::zeros(0, 0);
        }
        pre.push(z);
    }
    Ok(ForwardCache { inputs, pre })
}

/// Backpropagate an error signal `d loss / d logits` through a cached pass.
/// The result is linear in `out_err`.
pub fn backward(
    params: &LayeredParams,
    cache: &ForwardCache,
    out_err: &Tensor2D,
    transform: Option<&dyn FeatureTransform>,
) -> Gradients {
    let n = params.layers.len();
    let mut grads = Vec::with_capacity(n);
    let mut err = out_err.clone();
    for l in (0..n).rev() {
        let layer = &params.layers[l];
        let gw = cache.inputs[l].t_matmul(&err);
        let mut gb = vec![0.0; layer.fan_out()];
        for r in 0..err.rows {
            for (g, e) in gb.iter_mut().zip(err.row(r)) {
                *g += e;
            }
        }
        grads.push(Layer {
            weights: gw,
            bias: gb,
        });
        if l > 0 {
            let mut g_in = err.matmul_t(&layer.weights);
            if l == 1 {
                if let Some(t) = transform {
                    g_in = t.backward(&g_in);
                }
            }
            for (g, &p) in g_in.data.iter_mut().zip(&cache.pre[l - 1].data) {
                *g *= params.activation.derivative(p);
            }
            err = g_in;
        }
    }
    grads.reverse();
    Gradients { layers: grads }
}

pub fn forward(params: &LayeredParams, inputs: &Tensor2D) -> Result<Tensor2D> {
    let cache = forward_cached(params, inputs, None)?;
    Ok(cache.pre.into_iter().last().expect("at least one layer"))
}

/// Row-wise softmax with max-subtraction.
pub fn softmax(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean soft-target cross-entropy and `d loss / d logits`.
pub fn cross_entropy(logits: &Tensor2D, targets: &Tensor2D) -> (f64, Tensor2D) {
    let b = logits.rows as f64;
    let probs = softmax(logits);
    let mut loss = 0.0;
    for r in 0..logits.rows {
        let lsm = log_softmax_row(logits.row(r));
        loss -= dot(&lsm, targets.row(r));
    }
    let mut err = probs;
    for (e, t) in err.data.iter_mut().zip(&targets.data) {
        *e = (*e - t) / b;
    }
    (loss / b, err)
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Tensor2D {
    let mut t = Tensor2D::zeros(labels.len(), n_classes);
    for (r, &y) in labels.iter().enumerate() {
        t.set(r, y, 1.0);
    }
    t
}

fn check_batch(params: &LayeredParams, x: &Tensor2D, y: &[usize]) -> Result<()> {
    if x.rows == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    if y.len() != x.rows {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.rows)));
    }
    let c = params.n_classes();
    if let Some(&bad) = y.iter().find(|&&v| v >= c) {
        return Err(Error::Precondition(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradient for every layer,
/// frozen layers included.
pub fn loss_and_grad(params: &LayeredParams, batch_x: &Tensor2D, batch_y: &[usize]) -> Result<(f64, Gradients)> {
    loss_and_grad_with(params, batch_x, batch_y, None)
}

/// As [`loss_and_grad`], with an optional transform on the first hidden activation.
pub fn loss_and_grad_with(
    params: &LayeredParams,
    batch_x: &Tensor2D,
    batch_y: &[usize],
    mut transform: Option<&mut dyn FeatureTransform>,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch_x, batch_y)?;
    let targets = one_hot(batch_y, params.n_classes());
    let cache = forward_cached(params, batch_x, transform.as_mut().map(|t| &mut **t as &mut dyn FeatureTransform))?;
    let (loss, err) = cross_entropy(cache.logits(), &targets);
    let grads = backward(params, &cache, &err, transform.as_ref().map(|t| &**t as &dyn FeatureTransform));
    Ok((loss, grads))
}

/// Soft-label variant used by the gradient-inversion attack.
pub fn loss_and_grad_soft(params: &LayeredParams, batch_x: &Tensor2D, targets: &Tensor2D) -> Result<(f64, Gradients)> {
    if batch_x.rows == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    if targets.rows != batch_x.rows || targets.cols != params.n_classes() {
        return Err(Error::Shape("target matrix does not match batch".into()));
    }
    let cache = forward_cached(params, batch_x, None)?;
    let (loss, err) = cross_entropy(cache.logits(), targets);
    Ok((loss, backward(params, &cache, &err, None)))
}

/// Plain SGD on unfrozen layers; frozen layers are copied bit-for-bit.
pub fn sgd_step(params: &LayeredParams, grads: &Gradients, lr: f64) -> Result<LayeredParams> {
    if !(lr >= 0.0) {
        return Err(Error::Precondition(format!("learning rate must be >= 0, got {lr}")));
    }
    if !grads.matches_params(params) {
        return Err(Error::Shape("gradients do not match parameter shapes".into()));
    }
    let mut out = params.clone();
    for ((layer, g), &frozen) in out.layers.iter_mut().zip(&grads.layers).zip(&params.freeze_mask) {
        if frozen || lr == 0.0 {
            continue;
        }
        for (p, gv) in layer.values_mut().zip(g.values()) {
            *p -= lr * gv;
        }
    }
    Ok(out)
}

/// Predicted class per row (lowest index wins ties).
pub fn predict(params: &LayeredParams, x: &Tensor2D) -> Result<Vec<usize>> {
    let logits = forward(params, x)?;
    Ok((0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Accuracy and mean cross-entropy on a labelled set.
pub fn evaluate(params: &LayeredParams, x: &Tensor2D, y: &[usize]) -> Result<(f64, f64)> {
    check_batch(params, x, y)?;
    let logits = forward(params, x)?;
    let (loss, _) = cross_entropy(&logits, &one_hot(y, params.n_classes()));
    let pred = predict(params, x)?;
    let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok((correct as f64 / y.len() as f64, loss))
}
