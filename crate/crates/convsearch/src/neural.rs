//! Minimal differentiable substrate: affine layers with ReLU/identity
//! activations, softmax, cross-entropy and (masked) MSE losses, plain SGD
//! with L2 weight decay, and a central-difference gradient checker.
//!
//! Everything is 64-bit and deterministic given a seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// Uniform init in [-1/sqrt(cols), +1/sqrt(cols)].
    pub fn uniform_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// y = M x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] = dot(row, x);
        }
        y
    }

    /// y = M^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                y[c] += xr * row[c];
            }
        }
        y
    }

    /// self += alpha * u v^T
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let s = alpha * u[r];
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                row[c] += s * v[c];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stabilized softmax (shift-invariant by max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax of empty vector");
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::ReLU => z.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Identity => z.to_vec(),
        }
    }

    /// Derivative evaluated at pre-activation z.
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Feedforward network of affine layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Builds a net with the given layer sizes and per-layer activations.
    /// `dims` has one more entry than `activations`.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "layer count mismatch");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, &activation)| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: Mat::uniform_init(fan_out, fan_in, &mut rng),
                    bias: (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                    activation,
                }
            })
            .collect();
        DenseNet { layers }
    }

    /// Two-layer net with a ReLU hidden layer and identity output,
    /// the decision-network shape.
    pub fn two_layer(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        DenseNet::new(&[input, hidden, output], &[Activation::ReLU, Activation::Identity], seed)
    }

    /// Single affine layer with identity output (logistic-style classifier
    /// when paired with softmax cross-entropy).
    pub fn linear(input: usize, output: usize, seed: u64) -> Self {
        DenseNet::new(&[input, output], &[Activation::Identity], seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("net has no layers").weight.rows
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: input.len() });
        }
        let mut a = input.to_vec();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&a);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            a = layer.activation.apply(&z);
        }
        Ok(a)
    }

    /// Forward pass keeping pre-activations and activations per layer.
    fn forward_trace(&self, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len() + 1);
        act.push(input.to_vec());
        for layer in &self.layers {
            let mut z = layer.weight.matvec(act.last().unwrap());
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            act.push(layer.activation.apply(&z));
            pre.push(z);
        }
        (pre, act)
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "param vector length mismatch");
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.data.len();
            l.weight.data.copy_from_slice(&params[off..off + w]);
            off += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + b]);
            off += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Per-sample loss attachment.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Mean over output components of squared error.
    Mse { target: Vec<f64> },
    /// Squared error on a single output component, other outputs untouched.
    MseMasked { index: usize, target: f64 },
    /// Softmax cross-entropy with a one-hot positive.
    CrossEntropy { positive: usize },
}

impl LossSpec {
    /// Loss value and gradient w.r.t. the network output.
    fn eval(&self, output: &[f64]) -> (f64, Vec<f64>) {
        match self {
            LossSpec::Mse { target } => {
                assert_eq!(target.len(), output.len(), "MSE target length mismatch");
                let n = output.len() as f64;
                let mut grad = vec![0.0; output.len()];
                let mut loss = 0.0;
                for i in 0..output.len() {
                    let e = output[i] - target[i];
                    loss += e * e;
                    grad[i] = 2.0 * e / n;
                }
                (loss / n, grad)
            }
            LossSpec::MseMasked { index, target } => {
                let e = output[*index] - target;
                let mut grad = vec![0.0; output.len()];
                grad[*index] = 2.0 * e;
                (e * e, grad)
            }
            LossSpec::CrossEntropy { positive } => {
                let p = softmax(output);
                let loss = -(p[*positive].max(f64::MIN_POSITIVE)).ln();
                let mut grad = p;
                grad[*positive] -= 1.0;
                (loss, grad)
            }
        }
    }
}

/// Learning-rate, regularization, batching and seeding knobs shared by
/// every trainer in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub l2_weight: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { learning_rate: 1e-4, l2_weight: 1e-2, batch_size: 100, epochs: 10, seed: 0 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidFormat("learning rate must be > 0".into()));
        }
        if self.l2_weight < 0.0 {
            return Err(Error::InvalidFormat("l2 weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean data loss and parameter gradients for a batch. Gradients are in
/// `flatten_params` order and exclude the L2 term.
pub fn gradient(net: &DenseNet, batch: &[(Vec<f64>, LossSpec)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads = vec![0.0; net.param_count()];
    let mut total_loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (input, spec) in batch {
        if input.len() != net.input_dim() {
            return Err(Error::DimensionMismatch { expected: net.input_dim(), actual: input.len() });
        }
        let (pre, act) = net.forward_trace(input);
        let (loss, out_grad) = spec.eval(act.last().unwrap());
        total_loss += loss;
        // Backpropagate delta through the layers, accumulating into `grads`.
        let mut delta = out_grad;
        let mut offsets: Vec<usize> = Vec::with_capacity(net.layers.len());
        let mut off = 0;
        for l in &net.layers {
            offsets.push(off);
            off += l.weight.data.len() + l.bias.len();
        }
        for li in (0..net.layers.len()).rev() {
            let layer = &net.layers[li];
            for (d, &z) in delta.iter_mut().zip(&pre[li]) {
                *d *= layer.activation.deriv(z);
            }
            let base = offsets[li];
            let wlen = layer.weight.data.len();
            let input_act = &act[li];
            let cols = layer.weight.cols;
            for r in 0..layer.weight.rows {
                let dr = delta[r] * scale;
                if dr != 0.0 {
                    let g = &mut grads[base + r * cols..base + (r + 1) * cols];
                    for c in 0..cols {
                        g[c] += dr * input_act[c];
                    }
                }
                grads[base + wlen + r] += dr;
            }
            if li > 0 {
                delta = layer.weight.matvec_t(&delta);
            }
        }
    }
    Ok((total_loss * scale, grads))
}

/// One SGD step with L2 decay applied to weights (not biases).
/// Returns the pre-update mean batch loss.
pub fn backward_and_step(
    net: &mut DenseNet,
    batch: &[(Vec<f64>, LossSpec)],
    config: &TrainingConfig,
) -> Result<f64> {
    let (loss, grads) = gradient(net, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let lr = config.learning_rate;
    let lambda = config.l2_weight;
    let mut off = 0;
    for l in &mut net.layers {
        for w in l.weight.data.iter_mut() {
            *w -= lr * (grads[off] + lambda * *w);
            off += 1;
        }
        for b in l.bias.iter_mut() {
            *b -= lr * grads[off];
            off += 1;
        }
    }
    if !net.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central finite differences of `f` around `params`.
pub fn central_difference<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work);
        work[i] = orig - eps;
        let minus = f(&work);
        work[i] = orig;
        out[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// max_i |a_i - n_i| / max(|a_i| + |n_i|, 1e-8)
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Serialization: versioned binary with an embedded JSON header.
// ---------------------------------------------------------------------------

const NET_MAGIC: &[u8; 4] = b"DNET";
const NET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetHeader {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    meta: serde_json::Value,
}

impl DenseNet {
    /// Serializes to `DNET` magic, version, JSON header (shape + caller
    /// metadata), then raw little-endian f64 parameters.
    pub fn to_bytes(&self, meta: &serde_json::Value) -> Vec<u8> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows));
        let header = NetHeader {
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
            meta: meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serialization");
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&NET_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for p in self.flatten_params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let err = |m: &str| Error::InvalidFormat(format!("net file: {m}"));
        if bytes.len() < 12 || &bytes[0..4] != NET_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != NET_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(err("truncated header"));
        }
        let header: NetHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
        if header.dims.len() != header.activations.len() + 1 {
            return Err(err("inconsistent header"));
        }
        let mut net = DenseNet::new(&header.dims, &header.activations, 0);
        let body = &bytes[12 + hlen..];
        let expect = net.param_count() * 8;
        if body.len() != expect {
            return Err(err(&format!("expected {expect} param bytes, got {}", body.len())));
        }
        let params: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        net.set_params(&params);
        Ok((net, header.meta))
    }
}
