//! Small dense tensor substrate with hand-written reverse-mode gradients.
//!
//! Every forward op is paired with a `*_backward` function that takes the
//! forward inputs and the upstream gradient, accumulates parameter gradients
//! into caller-provided buffers and returns the gradient for the op's input.
//! Networks built on top are fixed pipelines, so no tape is recorded.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: kernel {kernel}x{kernel} larger than input {height}x{width}")]
    KernelTooLarge { op: &'static str, kernel: usize, height: usize, width: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

fn shape_err(op: &'static str, detail: String) -> NeuralError {
    NeuralError::Shape { op, detail }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err("tensor", format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    fn finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(NeuralError::NonFinite { op })
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, format!("expected 2-D tensor, got {s:?}"))),
        }
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Parameter::new(Tensor::zeros(shape))
    }

    /// Uniform in `(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
        Parameter::new(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// `input[B,I] . weight[I,O] + bias[O]`.
pub fn fc(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, i) = input.dims2("fc")?;
    let (wi, o) = weight.dims2("fc")?;
    if wi != i || bias.shape() != [o] {
        return Err(shape_err(
            "fc",
            format!("input {:?}, weight {:?}, bias {:?}", input.shape(), weight.shape(), bias.shape()),
        ));
    }
    let mut out = vec![0.0; b * o];
    for r in 0..b {
        let orow = &mut out[r * o..(r + 1) * o];
        orow.copy_from_slice(bias.data());
        for (k, &x) in input.data[r * i..(r + 1) * i].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (acc, &w) in orow.iter_mut().zip(&weight.data[k * o..(k + 1) * o]) {
                *acc += x * w;
            }
        }
    }
    Tensor { shape: vec![b, o], data: out }.finite("fc")
}

/// Accumulates `dL/dW` and `dL/db` and returns `dL/dinput`.
pub fn fc_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    grad_weight: &mut Tensor,
    grad_bias: &mut Tensor,
) -> Result<Tensor> {
    let (b, i) = input.dims2("fc_backward")?;
    let (_, o) = weight.dims2("fc_backward")?;
    if grad_out.shape() != [b, o] || grad_weight.shape() != weight.shape() || grad_bias.shape() != [o] {
        return Err(shape_err("fc_backward", format!("grad_out {:?}", grad_out.shape())));
    }
    let mut grad_in = vec![0.0; b * i];
    for r in 0..b {
        let g = &grad_out.data[r * o..(r + 1) * o];
        for (gb, &gv) in grad_bias.data.iter_mut().zip(g) {
            *gb += gv;
        }
        let x = &input.data[r * i..(r + 1) * i];
        let gi = &mut grad_in[r * i..(r + 1) * i];
        for k in 0..i {
            let wrow = &weight.data[k * o..(k + 1) * o];
            gi[k] = wrow.iter().zip(g).map(|(w, gv)| w * gv).sum();
            let xk = x[k];
            if xk != 0.0 {
                for (gw, &gv) in grad_weight.data[k * o..(k + 1) * o].iter_mut().zip(g) {
                    *gw += xk * gv;
                }
            }
        }
    }
    Tensor { shape: vec![b, i], data: grad_in }.finite("fc_backward")
}

fn conv_dims(op: &'static str, input: &Tensor, kernel: &Tensor, stride: usize) -> Result<[usize; 8]> {
    let (&[b, c, h, w], &[f, kc, k, k2]) = (input.shape(), kernel.shape()) else {
        return Err(shape_err(op, format!("input {:?}, kernel {:?}", input.shape(), kernel.shape())));
    };
    if kc != c || k != k2 || stride == 0 {
        return Err(shape_err(op, format!("input {:?}, kernel {:?}, stride {stride}", input.shape(), kernel.shape())));
    }
    if k > h || k > w {
        return Err(NeuralError::KernelTooLarge { op, kernel: k, height: h, width: w });
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    Ok([b, c, h, w, f, k, ho, wo])
}

/// Valid (unpadded) cross-correlation: `[B,C,H,W] * [F,C,k,k] -> [B,F,Ho,Wo]`,
/// `Ho = (H - k) / stride + 1`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let [b, c, h, w, f, k, ho, wo] = conv_dims("conv2d", input, kernel, stride)?;
    let mut out = vec![0.0; b * f * ho * wo];
    for bi in 0..b {
        for fi in 0..f {
            let o = &mut out[(bi * f + fi) * ho * wo..(bi * f + fi + 1) * ho * wo];
            for ci in 0..c {
                let plane = &input.data[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let kern = &kernel.data[(fi * c + ci) * k * k..(fi * c + ci + 1) * k * k];
                for oy in 0..ho {
                    for ky in 0..k {
                        let irow = &plane[(oy * stride + ky) * w..];
                        let krow = &kern[ky * k..(ky + 1) * k];
                        for ox in 0..wo {
                            let base = ox * stride;
                            let mut acc = 0.0;
                            for kx in 0..k {
                                acc += irow[base + kx] * krow[kx];
                            }
                            o[oy * wo + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![b, f, ho, wo], data: out }.finite("conv2d")
}

/// Accumulates `dL/dkernel` and returns `dL/dinput`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    grad_kernel: &mut Tensor,
) -> Result<Tensor> {
    let [b, c, h, w, f, k, ho, wo] = conv_dims("conv2d_backward", input, kernel, stride)?;
    if grad_out.shape() != [b, f, ho, wo] || grad_kernel.shape() != kernel.shape() {
        return Err(shape_err("conv2d_backward", format!("grad_out {:?}", grad_out.shape())));
    }
    let mut grad_in = vec![0.0; input.len()];
    for bi in 0..b {
        for fi in 0..f {
            let g = &grad_out.data[(bi * f + fi) * ho * wo..(bi * f + fi + 1) * ho * wo];
            for ci in 0..c {
                let poff = (bi * c + ci) * h * w;
                let koff = (fi * c + ci) * k * k;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[oy * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..k {
                            let irow = poff + (oy * stride + ky) * w + ox * stride;
                            let krow = koff + ky * k;
                            for kx in 0..k {
                                grad_kernel.data[krow + kx] += gv * input.data[irow + kx];
                                grad_in[irow + kx] += gv * kernel.data[krow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: input.shape.clone(), data: grad_in }.finite("conv2d_backward")
}

/// Adds `bias[F]` to every position of channel `F` of a `[B,F,H,W]` tensor.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let &[_, f, h, w] = x.shape() else {
        return Err(shape_err("channel_bias", format!("{:?}", x.shape())));
    };
    if bias.shape() != [f] {
        return Err(shape_err("channel_bias", format!("bias {:?} for {f} channels", bias.shape())));
    }
    for (chunk_idx, chunk) in x.data.chunks_mut(h * w).enumerate() {
        let bv = bias.data[chunk_idx % f];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    Ok(())
}

pub fn channel_bias_backward(grad_out: &Tensor, grad_bias: &mut Tensor) {
    let (f, hw) = (grad_out.shape[1], grad_out.shape[2] * grad_out.shape[3]);
    for (chunk_idx, chunk) in grad_out.data.chunks(hw).enumerate() {
        grad_bias.data[chunk_idx % f] += chunk.iter().sum::<f64>();
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: pre.shape.clone(),
        data: pre.data.iter().zip(&grad_out.data).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect(),
    }
}

/// Softmax over the trailing axis, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let n = *logits.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
    if n == 0 {
        return Err(shape_err("softmax", "empty trailing axis".into()));
    }
    let mut out = logits.data.clone();
    for slice in out.chunks_mut(n) {
        softmax_in_place(slice);
    }
    Tensor { shape: logits.shape.clone(), data: out }.finite("softmax")
}

pub fn softmax_in_place(slice: &mut [f64]) {
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in slice.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in slice.iter_mut() {
        *v /= sum;
    }
}

/// Gradient through softmax given its output: `s * (g - <s, g>)` per slice.
pub fn softmax_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = *out.shape.last().unwrap_or(&1);
    let mut grad = vec![0.0; out.len()];
    for ((s, g), gi) in out.data.chunks(n).zip(grad_out.data.chunks(n)).zip(grad.chunks_mut(n)) {
        softmax_slice_backward(s, g, gi);
    }
    Tensor { shape: out.shape.clone(), data: grad }
}

pub fn softmax_slice_backward(s: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &sv), &gv) in out.iter_mut().zip(s).zip(g) {
        *o = sv * (gv - dot);
    }
}

/// Row-wise concatenation of two 2-D tensors with equal row counts.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.dims2("concat")?;
    let (rb, cb) = b.dims2("concat")?;
    if ra != rb {
        return Err(shape_err("concat", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for r in 0..ra {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Ok(Tensor { shape: vec![ra, ca + cb], data })
}

/// Below this norm a row is divided by the floor instead of its norm.
pub const NORM_FLOOR: f64 = 1e-12;

/// Scales every row of a 2-D tensor to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (r, _) = x.dims2("l2_normalize")?;
    let mut out = x.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out.finite("l2_normalize")
}

/// Gradient of row-wise normalization: `(g - y <y, g>) / |x|`.
pub fn l2_normalize_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (r, _) = x.dims2("l2_normalize_backward")?;
    let mut grad = grad_out.clone();
    for i in 0..r {
        let xr = x.row(i);
        let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = raw.max(NORM_FLOOR);
        let g = grad.row_mut(i);
        if raw < NORM_FLOOR {
            g.iter_mut().for_each(|v| *v /= norm);
            continue;
        }
        let dot: f64 = xr.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>() / norm;
        for (gv, &xv) in g.iter_mut().zip(xr) {
            *gv = (*gv - xv / norm * dot) / norm;
        }
    }
    grad.finite("l2_normalize_backward")
}

/// Fully connected layer with `[I,O]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::glorot(&[inputs, outputs], inputs, outputs, rng),
            bias: Parameter::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        fc(x, &self.weight.value, &self.bias.value)
    }

    /// Backward pass accumulating into `grads = [weight, bias]`.
    pub fn backward_into(&self, x: &Tensor, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let [gw, gb] = grads else {
            return Err(shape_err("linear", "expected two gradient buffers".into()));
        };
        fc_backward(x, &self.weight.value, grad_out, gw, gb)
    }

    /// Backward pass accumulating into this layer's own parameter gradients.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        fc_backward(x, &self.weight.value, grad_out, &mut self.weight.grad, &mut self.bias.grad)
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Valid convolution with per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: Parameter,
    pub bias: Parameter,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Conv2d {
            kernel: Parameter::glorot(&[out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k, rng),
            bias: Parameter::zeros(&[out_ch]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = conv2d(x, &self.kernel.value, self.stride)?;
        add_channel_bias(&mut out, &self.bias.value)?;
        Ok(out)
    }

    pub fn backward_into(&self, x: &Tensor, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let [gk, gb] = grads else {
            return Err(shape_err("conv", "expected two gradient buffers".into()));
        };
        channel_bias_backward(grad_out, gb);
        conv2d_backward(x, &self.kernel.value, self.stride, grad_out, gk)
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.kernel, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.kernel, &mut self.bias]
    }
}

/// A scalar objective over a fixed set of parameters.
pub trait Objective {
    type Input;

    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    /// Forward pass only; must produce a one-element tensor.
    fn loss(&self, input: &Self::Input) -> Result<Tensor>;

    /// Forward and backward pass, adding gradients to every parameter's `grad`.
    fn loss_and_grad(&mut self, input: &Self::Input) -> Result<Tensor>;

    /// Sign pattern of every ReLU pre-activation, used to discard finite
    /// differences that straddle a kink. Empty when the objective is smooth.
    fn relu_pattern(&self, _input: &Self::Input) -> Result<Vec<bool>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a ReLU.
    pub skipped_kinks: usize,
}

/// Compares reverse-mode gradients against central finite differences.
///
/// The error of one coordinate is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
/// With `sample = Some((n, seed))` at most `n` random elements per parameter
/// are checked; otherwise every element is.
pub fn grad_check<O: Objective>(
    objective: &mut O,
    input: &O::Input,
    epsilon: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport> {
    for p in objective.parameters_mut() {
        p.zero_grad();
    }
    let loss = objective.loss_and_grad(input)?;
    if loss.len() != 1 {
        return Err(NeuralError::NonScalarLoss(loss.shape().to_vec()));
    }
    let analytic: Vec<Vec<f64>> = objective.parameters().iter().map(|p| p.grad.data().to_vec()).collect();
    let base_pattern = objective.relu_pattern(input)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(sample.map_or(0, |s| s.1));

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 };
    for (pi, grads) in analytic.iter().enumerate() {
        let indices: Vec<usize> = match sample {
            Some((n, _)) if n < grads.len() => rand::seq::index::sample(&mut rng, grads.len(), n).into_vec(),
            _ => (0..grads.len()).collect(),
        };
        for ei in indices {
            let original = objective.parameters()[pi].value.data()[ei];
            let eval = |obj: &mut O, v: f64| -> Result<(f64, bool)> {
                obj.parameters_mut()[pi].value.data_mut()[ei] = v;
                let l = obj.loss(input)?;
                if l.len() != 1 {
                    return Err(NeuralError::NonScalarLoss(l.shape().to_vec()));
                }
                let same = obj.relu_pattern(input)? == base_pattern;
                Ok((l.data()[0], same))
            };
            let plus = eval(objective, original + epsilon);
            let minus = eval(objective, original - epsilon);
            objective.parameters_mut()[pi].value.data_mut()[ei] = original;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if !(sp && sm) {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * epsilon);
            let ad = grads[ei];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}

pub const CHECKPOINT_FORMAT: &str = "deepword-tensors";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheckpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl TensorCheckpoint {
    pub fn new<'a>(named: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        TensorCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            tensors: named
                .into_iter()
                .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
        }
    }

    /// Checks the header and returns the tensors in stored order.
    pub fn into_tensors(self) -> Result<Vec<(String, Tensor)>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported header {} v{}",
                self.format, self.version
            )));
        }
        self.tensors
            .into_iter()
            .map(|t| {
                let name = t.name;
                Tensor::new(t.shape, t.data)
                    .map(|tensor| (name.clone(), tensor))
                    .map_err(|e| NeuralError::Checkpoint(format!("{name}: {e}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fc_identity_and_bias() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(fc(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::from_vec(vec![0.1, 0.2]);
        let out = fc(&x, &Tensor::zeros(&[3, 2]), &b).unwrap();
        assert_eq!(out.row(0), b.data());
        assert_eq!(out.row(1), b.data());
    }

    #[test]
    fn fc_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 3], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let out = fc(&x, &w, &b).unwrap();
        for r in 0..4 {
            for o in 0..2 {
                let mut acc = b.data()[o];
                for k in 0..3 {
                    acc += x.data()[r * 3 + k] * w.data()[k * 2 + o];
                }
                assert!((out.data()[r * 2 + o] - acc).abs() < 1e-12);
            }
        }
        assert!(matches!(fc(&x, &random(&[2, 2], &mut rng), &b), Err(NeuralError::Shape { .. })));
    }

    #[test]
    fn conv_simple_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 3, 4, 5], &mut rng);
        let ones = Tensor::new(vec![1, 3, 1, 1], vec![1.0; 3]).unwrap();
        let out = conv2d(&x, &ones, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 5]);
        for p in 0..20 {
            let sum: f64 = (0..3).map(|c| x.data()[c * 20 + p]).sum();
            assert!((out.data()[p] - sum).abs() < 1e-15);
        }
        let c = Tensor::new(vec![1, 1, 5, 5], vec![0.75; 25]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let out = conv2d(&c, &k, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 1, 6, 6], &mut rng);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let out = conv2d(&x, &k, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        for f in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += x.data()[(oy * 2 + ky) * 6 + ox * 2 + kx] * k.data()[f * 9 + ky * 3 + kx];
                        }
                    }
                    assert!((out.data()[f * 4 + oy * 2 + ox] - acc).abs() < 1e-12);
                }
            }
        }
        let big = random(&[1, 1, 7, 7], &mut rng);
        assert!(matches!(conv2d(&x, &big, 1), Err(NeuralError::KernelTooLarge { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::from_vec(vec![0.3, 0.3])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_vec(vec![1000.0, 1000.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_vec(vec![0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_finite_trips() {
        let x = Tensor::new(vec![1, 1], vec![f64::MAX]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![10.0]).unwrap();
        assert_eq!(fc(&x, &w, &Tensor::zeros(&[1])), Err(NeuralError::NonFinite { op: "fc" }));
    }

    #[test]
    fn l2_normalize_rows() {
        let x = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = l2_normalize(&x).unwrap();
        assert_eq!(y.data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_header_is_checked() {
        let t = Tensor::zeros(&[2, 2]);
        let mut ck = TensorCheckpoint::new([("w".to_string(), &t)]);
        assert_eq!(ck.clone().into_tensors().unwrap(), vec![("w".to_string(), t)]);
        ck.version = 99;
        assert!(ck.into_tensors().is_err());
    }
}
