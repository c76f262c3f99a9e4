//! Minimal dense feedforward network.
//!
//! Layers compute `activation(W x + b)` with `W` stored row-major as
//! `(out_dim, in_dim)`. The final layer produces logits; class confidences are
//! the softmax of those logits. Backpropagation is exact and can target the
//! parameters, the input, or both, which is what attacks need.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Log clamp applied to zero probabilities that carry positive target weight.
pub const LOG_CLAMP: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Dense row-major matrix of `rows × cols` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Dense layer `activation(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self { in_dim, out_dim, activation, weights, biases })
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self::new(in_dim, out_dim, activation, weights, vec![0.0; out_dim])
    }

    fn weight_row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_dim..(o + 1) * self.in_dim]
    }
}

/// Per-layer pre-activations and activations for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.post
    }

    /// Final-layer outputs, one row of `K` logits per example.
    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("network has at least one layer")
    }

    /// Softmax of every logit row.
    pub fn probs(&self) -> Matrix {
        let logits = self.logits();
        let mut data = Vec::with_capacity(logits.as_slice().len());
        for row in logits.iter_rows() {
            data.extend(softmax(row));
        }
        Matrix { rows: logits.rows(), cols: logits.cols(), data }
    }
}

/// Which gradients `backward` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Input,
    Both,
}

impl Wrt {
    fn params(self) -> bool {
        matches!(self, Wrt::Params | Wrt::Both)
    }

    fn input(self) -> bool {
        matches!(self, Wrt::Input | Wrt::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Per layer, row-major like [`DenseLayer::weights`]. Empty when
    /// parameters were not requested.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to the input batch, one row per example.
    pub input: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
            input: None,
        }
    }

    fn param_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.biases).flatten().copied()
    }
}

/// Result of a soft-target cross-entropy evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// Set when a zero probability met a positive target weight and the log
    /// argument was clamped at [`LOG_CLAMP`].
    pub clamped: bool,
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−Σ_k target_k · log probs_k`.
pub fn cross_entropy_soft(probs: &[f64], target: &[f64]) -> Result<CrossEntropy> {
    if probs.len() != target.len() {
        return Err(Error::Shape(format!(
            "probs has {} classes, target {}",
            probs.len(),
            target.len()
        )));
    }
    for (name, v) in [("probs", probs), ("target", target)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("{name} sums to {s}, expected 1")));
        }
    }
    let mut clamped = false;
    let mut value = 0.0;
    for (&p, &t) in probs.iter().zip(target) {
        if t == 0.0 {
            continue;
        }
        let p = if p <= 0.0 {
            clamped = true;
            LOG_CLAMP
        } else {
            p
        };
        value -= t * p.ln();
    }
    Ok(CrossEntropy { value, clamped })
}

/// Cross-entropy from logits via log-softmax; no clamping needed.
pub fn cross_entropy_logits(logits: &[f64], target: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&z, &t)| t * (lse - z))
        .sum()
}

pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

/// Layered dense feedforward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let last = layers.len().checked_sub(1).ok_or(Error::Empty("network layers"))?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.activation == Activation::Identity && i != last {
                return Err(Error::InvalidConfig(format!(
                    "identity activation only allowed on the logit layer (layer {i})"
                )));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::Shape(format!("layer {i} parameter count")));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        if layers[last].out_dim < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        Ok(Self { layers })
    }

    /// ReLU hidden layers followed by an identity logit layer, Glorot init.
    ///
    /// `dims = [input, hidden.., classes]`.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("mlp needs input and output dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::Relu };
                DenseLayer::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if batch.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input"));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().unwrap_or(batch);
            let mut z = Matrix::zeros(input.rows(), layer.out_dim);
            for b in 0..input.rows() {
                let x = input.row(b);
                let out = z.row_mut(b);
                for (o, zo) in out.iter_mut().enumerate() {
                    *zo = layer.biases[o] + dot(layer.weight_row(o), x);
                }
            }
            let a = match layer.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => {
                    let mut a = z.clone();
                    a.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    a
                }
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardTrace { input: batch.clone(), pre, post })
    }

    /// Logits for a single example.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x))?.logits().row(0).to_vec())
    }

    /// Class confidences `softmax(logits(x))` for a single example.
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Exact gradients of the mean batch cross-entropy against `targets`
    /// (one probability row per example).
    pub fn backward(&self, trace: &ForwardTrace, targets: &Matrix, wrt: Wrt) -> Result<Gradients> {
        let logits = trace.logits();
        if targets.rows() != logits.rows() || targets.cols() != logits.cols() {
            return Err(Error::Shape(format!(
                "targets {}x{} vs logits {}x{}",
                targets.rows(),
                targets.cols(),
                logits.rows(),
                logits.cols()
            )));
        }
        let scale = 1.0 / logits.rows() as f64;
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for b in 0..logits.rows() {
            let p = softmax(logits.row(b));
            let t = targets.row(b);
            let mass: f64 = t.iter().sum();
            for (k, d) in dlogits.row_mut(b).iter_mut().enumerate() {
                *d = (mass * p[k] - t[k]) * scale;
            }
        }
        self.backward_from_logits(trace, &dlogits, wrt)
    }

    /// Vector-Jacobian product: propagates `dlogits` (∂loss/∂logits per
    /// example) back through the network.
    pub fn backward_from_logits(
        &self,
        trace: &ForwardTrace,
        dlogits: &Matrix,
        wrt: Wrt,
    ) -> Result<Gradients> {
        self.check_trace(trace)?;
        let batch = trace.batch_size();
        if dlogits.rows() != batch || dlogits.cols() != self.num_classes() {
            return Err(Error::Shape("dlogits does not match trace".into()));
        }
        let mut grads = Gradients {
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
            input: None,
        };
        let mut upstream = dlogits.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let mut dz = upstream;
            if layer.activation == Activation::Relu {
                for (d, &z) in dz.data.iter_mut().zip(&trace.pre[li].data) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = if li == 0 { &trace.input } else { &trace.post[li - 1] };
            if wrt.params() {
                let mut dw = vec![0.0; layer.weights.len()];
                let mut db = vec![0.0; layer.out_dim];
                for b in 0..batch {
                    let x = input.row(b);
                    for (o, &g) in dz.row(b).iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        let row = &mut dw[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (w, &xi) in row.iter_mut().zip(x) {
                            *w += g * xi;
                        }
                    }
                }
                grads.weights.push(dw);
                grads.biases.push(db);
            }
            if li > 0 || wrt.input() {
                let mut dx = Matrix::zeros(batch, layer.in_dim);
                for b in 0..batch {
                    let out = dx.row_mut(b);
                    for (o, &g) in dz.row(b).iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        for (d, &w) in out.iter_mut().zip(layer.weight_row(o)) {
                            *d += g * w;
                        }
                    }
                }
                upstream = dx;
            } else {
                upstream = Matrix::zeros(0, 0);
            }
        }
        grads.weights.reverse();
        grads.biases.reverse();
        if wrt.input() {
            grads.input = Some(upstream);
        }
        Ok(grads)
    }

    /// `θ ← θ − lr · ∇θ` for every parameter. Rejects non-finite gradients
    /// without touching the network.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        if grads.weights.len() != self.layers.len() || grads.biases.len() != self.layers.len() {
            return Err(Error::Shape("gradients do not cover every layer".into()));
        }
        for (l, (gw, gb)) in self.layers.iter().zip(grads.weights.iter().zip(&grads.biases)) {
            if gw.len() != l.weights.len() || gb.len() != l.biases.len() {
                return Err(Error::Shape("gradient shape differs from layer".into()));
            }
        }
        if grads.param_values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        for (l, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            for (w, g) in l.weights.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            for (b, g) in l.biases.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        Ok(())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.pre.len() != self.layers.len() || trace.input.cols() != self.input_dim() {
            return Err(Error::Shape("trace was not produced by this network".into()));
        }
        for (l, z) in self.layers.iter().zip(&trace.pre) {
            if z.cols() != l.out_dim || z.rows() != trace.batch_size() {
                return Err(Error::Shape("trace was not produced by this network".into()));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument {
            format: NETWORK_FORMAT.to_string(),
            version: NETWORK_VERSION,
            dims: self.dims(),
            layers: self.layers.clone(),
        }
    }

    pub fn from_document(doc: NetworkDocument) -> Result<Self> {
        if doc.format != NETWORK_FORMAT || doc.version != NETWORK_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported network document {} v{}",
                doc.format, doc.version
            )));
        }
        let net = Self::from_layers(doc.layers)?;
        if net.dims() != doc.dims {
            return Err(Error::Shape(format!("dims {:?} disagree with layers", doc.dims)));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub const NETWORK_FORMAT: &str = "ccat-network";
pub const NETWORK_VERSION: u32 = 1;

/// Versioned on-disk form of a [`Network`]. Parameters are row-major arrays;
/// f64 values round-trip exactly through JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub layers: Vec<DenseLayer>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
