//! Neural network kernels with explicit forward and backward passes.
//!
//! The network is a fixed feed-forward graph, so there is no tape or graph
//! machinery: each op exposes `*_forward` and `*_backward` functions and the
//! caller wires them together. All kernels are direct summation over f64
//! slices with a fixed accumulation order.
//!
//! Layout conventions:
//! * conv input:  `[batch, in_channels, length]`
//! * conv weight: `[out_channels, in_channels, kernel]`
//! * conv bias:   `[out_channels]`
//! * logits:      `[batch, positions, classes]`

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// 1D convolution
// ---------------------------------------------------------------------------

/// Geometry of a 1D convolution: kernel size, stride, dilation and
/// symmetric zero padding, plus channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv1dSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    /// Kernel extent after dilation: `d*(k-1) + 1`.
    #[inline]
    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output length for a given input length, or `None` when the padded
    /// input is shorter than the effective kernel:
    /// `floor((L + 2p - d*(k-1) - 1) / s) + 1`.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let padded = input_len + 2 * self.padding;
        let ek = self.effective_kernel();
        if padded < ek {
            None
        } else {
            Some((padded - ek) / self.stride + 1)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::Shape(format!(
                "conv1d: degenerate spec {:?}",
                self
            )));
        }
        Ok(())
    }
}

fn conv_check_shapes(
    input: &Tensor,
    spec: &Conv1dSpec,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv1d: input must be [b, c_in, L], got {:?}",
            ishape
        )));
    }
    let (b, c_in, l_in) = (ishape[0], ishape[1], ishape[2]);
    if c_in != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv1d: input has {} channels, spec expects {}",
            c_in, spec.in_channels
        )));
    }
    if weight.shape() != [spec.out_channels, spec.in_channels, spec.kernel] {
        return Err(Error::Shape(format!(
            "conv1d: weight {:?}, expected [{}, {}, {}]",
            weight.shape(),
            spec.out_channels,
            spec.in_channels,
            spec.kernel
        )));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::Shape(format!(
            "conv1d: bias {:?}, expected [{}]",
            bias.shape(),
            spec.out_channels
        )));
    }
    let l_out = spec.output_len(l_in).ok_or_else(|| Error::WindowTooShort {
        layer: "conv1d".to_string(),
        input_len: l_in,
    })?;
    Ok((b, l_in, l_out))
}

/// Valid output range `[j_lo, j_hi)` for tap `m`: the `j` for which
/// `j*s + m*d - p` falls inside `[0, l_in)`.
#[inline]
fn tap_bounds(spec: &Conv1dSpec, m: usize, l_in: usize, l_out: usize) -> (usize, usize, isize) {
    let off = (m * spec.dilation) as isize - spec.padding as isize;
    let s = spec.stride as isize;
    let j_lo = if off >= 0 {
        0
    } else {
        (((-off) + s - 1) / s) as usize
    };
    let j_hi = {
        let max_pos = l_in as isize - 1 - off;
        if max_pos < 0 {
            0
        } else {
            ((max_pos / s) as usize + 1).min(l_out)
        }
    };
    (j_lo.min(l_out), j_hi, off)
}

/// Cross-correlation with zero padding.
pub fn conv1d_forward(
    input: &Tensor,
    spec: &Conv1dSpec,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let (b, l_in, l_out) = conv_check_shapes(input, spec, weight, bias)?;
    let (c_in, c_out, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let x = input.data();
    let w = weight.data();
    let bv = bias.data();
    let mut out = Tensor::zeros(&[b, c_out, l_out]);
    let s = spec.stride as isize;
    {
        let o = out.data_mut();
        for bi in 0..b {
            for oc in 0..c_out {
                let out_row = &mut o[(bi * c_out + oc) * l_out..(bi * c_out + oc + 1) * l_out];
                out_row.iter_mut().for_each(|v| *v = bv[oc]);
                for ic in 0..c_in {
                    let x_row = &x[(bi * c_in + ic) * l_in..(bi * c_in + ic + 1) * l_in];
                    let w_row = &w[(oc * c_in + ic) * k..(oc * c_in + ic + 1) * k];
                    for (m, &wv) in w_row.iter().enumerate() {
                        let (j_lo, j_hi, off) = tap_bounds(spec, m, l_in, l_out);
                        for j in j_lo..j_hi {
                            let pos = (j as isize * s + off) as usize;
                            out_row[j] += wv * x_row[pos];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv1d_forward(...))` with respect to the
/// input, weight and bias.
pub fn conv1d_backward(
    input: &Tensor,
    spec: &Conv1dSpec,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias = Tensor::zeros(&[spec.out_channels]);
    let (b, l_in, l_out) = conv_check_shapes(input, spec, weight, &bias)?;
    if grad_out.shape() != [b, spec.out_channels, l_out] {
        return Err(Error::Shape(format!(
            "conv1d_backward: grad_out {:?}, expected [{}, {}, {}]",
            grad_out.shape(),
            b,
            spec.out_channels,
            l_out
        )));
    }
    let (c_in, c_out, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut grad_bias = Tensor::zeros(&[c_out]);
    let s = spec.stride as isize;
    {
        let gi = grad_input.data_mut();
        let gw = grad_weight.data_mut();
        let gb = grad_bias.data_mut();
        for bi in 0..b {
            for oc in 0..c_out {
                let g_row = &g[(bi * c_out + oc) * l_out..(bi * c_out + oc + 1) * l_out];
                gb[oc] += g_row.iter().sum::<f64>();
                for ic in 0..c_in {
                    let x_row = &x[(bi * c_in + ic) * l_in..(bi * c_in + ic + 1) * l_in];
                    let gi_row =
                        &mut gi[(bi * c_in + ic) * l_in..(bi * c_in + ic + 1) * l_in];
                    for m in 0..k {
                        let wv = w[(oc * c_in + ic) * k + m];
                        let (j_lo, j_hi, off) = tap_bounds(spec, m, l_in, l_out);
                        let mut acc = 0.0;
                        for j in j_lo..j_hi {
                            let pos = (j as isize * s + off) as usize;
                            gi_row[pos] += wv * g_row[j];
                            acc += x_row[pos] * g_row[j];
                        }
                        gw[(oc * c_in + ic) * k + m] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

// ---------------------------------------------------------------------------
// Batch normalization over [batch, channel, length]
// ---------------------------------------------------------------------------

/// Forward/backward mode selector. Train mode uses batch statistics and
/// updates running averages; eval mode uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization state: learned affine parameters plus
/// running statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.fill(1.0);
        let mut running_var = Tensor::zeros(&[channels]);
        running_var.fill(1.0);
        Self {
            gamma: Parameter::new(gamma),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var,
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }
}

/// Values cached by the train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

fn bn_check(input: &Tensor, state: &BatchNormState) -> Result<(usize, usize, usize)> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "batchnorm1d: input must be [b, c, L], got {:?}",
            shape
        )));
    }
    if shape[1] != state.channels() {
        return Err(Error::Shape(format!(
            "batchnorm1d: input has {} channels, state has {}",
            shape[1],
            state.channels()
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Train-mode forward: normalize by batch statistics over (batch, length)
/// per channel, update running statistics, apply the affine transform.
/// Running variance is updated with the unbiased estimate.
pub fn batchnorm1d_forward_train(
    input: &Tensor,
    state: &mut BatchNormState,
) -> Result<(Tensor, BnCache)> {
    let (b, c, l) = bn_check(input, state)?;
    let n = b * l;
    if n < 2 {
        return Err(Error::Numeric(format!(
            "batchnorm1d: train mode needs at least 2 values per channel, got {}",
            n
        )));
    }
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let mut x_hat = Tensor::zeros(input.shape());
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let row = &x[(bi * c + ch) * l..(bi * c + ch + 1) * l];
            sum += row.iter().sum::<f64>();
        }
        let mean = sum / n as f64;
        let mut var_sum = 0.0;
        for bi in 0..b {
            let row = &x[(bi * c + ch) * l..(bi * c + ch + 1) * l];
            var_sum += row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let var = var_sum / n as f64;
        let istd = 1.0 / (var + state.epsilon).sqrt();
        inv_std[ch] = istd;
        let gamma = state.gamma.value.data()[ch];
        let beta = state.beta.value.data()[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                let xh = (x[base + i] - mean) * istd;
                x_hat.data_mut()[base + i] = xh;
                out.data_mut()[base + i] = gamma * xh + beta;
            }
        }
        let unbiased = var * n as f64 / (n - 1) as f64;
        let rm = &mut state.running_mean.data_mut()[ch];
        *rm = (1.0 - state.momentum) * *rm + state.momentum * mean;
        let rv = &mut state.running_var.data_mut()[ch];
        *rv = (1.0 - state.momentum) * *rv + state.momentum * unbiased;
    }
    Ok((out, BnCache { x_hat, inv_std }))
}

/// Eval-mode forward: normalize by the stored running statistics.
pub fn batchnorm1d_forward_eval(input: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    let (b, c, l) = bn_check(input, state)?;
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    for ch in 0..c {
        let mean = state.running_mean.data()[ch];
        let istd = 1.0 / (state.running_var.data()[ch] + state.epsilon).sqrt();
        let gamma = state.gamma.value.data()[ch];
        let beta = state.beta.value.data()[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                out.data_mut()[base + i] = gamma * (x[base + i] - mean) * istd + beta;
            }
        }
    }
    Ok(out)
}

/// Mode-dispatching wrapper over the two forward paths.
pub fn batchnorm1d_forward(
    input: &Tensor,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<(Tensor, Option<BnCache>)> {
    match mode {
        Mode::Train => {
            let (out, cache) = batchnorm1d_forward_train(input, state)?;
            Ok((out, Some(cache)))
        }
        Mode::Eval => Ok((batchnorm1d_forward_eval(input, state)?, None)),
    }
}

/// Train-mode backward. Returns (grad_input, grad_gamma, grad_beta).
///
/// With `xh` the normalized input and `N = b*L` per channel:
/// `dx = gamma * inv_std / N * (N*g - sum(g) - xh * sum(g*xh))`.
pub fn batchnorm1d_backward(
    state: &BatchNormState,
    cache: &BnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::Shape(format!(
            "batchnorm1d_backward: grad_out {:?} vs cache {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let shape = grad_out.shape();
    let (b, c, l) = (shape[0], shape[1], shape[2]);
    let n = (b * l) as f64;
    let g = grad_out.data();
    let xh = cache.x_hat.data();
    let mut grad_input = Tensor::zeros(shape);
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                sum_g += g[base + i];
                sum_gx += g[base + i] * xh[base + i];
            }
        }
        grad_gamma.data_mut()[ch] = sum_gx;
        grad_beta.data_mut()[ch] = sum_g;
        let gamma = state.gamma.value.data()[ch];
        let istd = cache.inv_std[ch];
        let scale = gamma * istd / n;
        for bi in 0..b {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                grad_input.data_mut()[base + i] =
                    scale * (n * g[base + i] - sum_g - xh[base + i] * sum_gx);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

/// Eval-mode backward: the normalization is a fixed affine map.
pub fn batchnorm1d_backward_eval(
    input: &Tensor,
    state: &BatchNormState,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, l) = bn_check(input, state)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "batchnorm1d_backward_eval: grad_out {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mean = state.running_mean.data()[ch];
        let istd = 1.0 / (state.running_var.data()[ch] + state.epsilon).sqrt();
        let gamma = state.gamma.value.data()[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * l;
            for i in 0..l {
                grad_input.data_mut()[base + i] = g[base + i] * gamma * istd;
                grad_gamma.data_mut()[ch] += g[base + i] * (x[base + i] - mean) * istd;
                grad_beta.data_mut()[ch] += g[base + i];
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(0.0))
}

/// Backward masks by `input > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu_backward: input {:?} vs grad_out {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    Ok(Tensor::from_fn(input.shape(), |i| {
        if input.data()[i] > 0.0 {
            grad_out.data()[i]
        } else {
            0.0
        }
    }))
}

// ---------------------------------------------------------------------------
// Softmax and weighted cross-entropy
// ---------------------------------------------------------------------------

/// Softmax over the last axis, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let shape = logits.shape();
    let c = *shape.last().expect("softmax: rank >= 1");
    let rows = logits.numel() / c;
    let mut out = Tensor::zeros(shape);
    let x = logits.data();
    let o = out.data_mut();
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let e = (row[i] - max).exp();
            o[r * c + i] = e;
            sum += e;
        }
        for i in 0..c {
            o[r * c + i] /= sum;
        }
    }
    out
}

/// Weighted cross-entropy over `[batch, positions, classes]` logits.
///
/// `loss = sum_n w[y_n] * (-log softmax(z_n)[y_n]) / sum_n w[y_n]`,
/// a weighted mean over all label positions. Returns the loss and its
/// gradient with respect to the logits. When every applied weight is zero
/// the loss and gradient are zero (degenerate batches train nothing).
pub fn weighted_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "cross_entropy: logits must be [b, t0, c], got {:?}",
            shape
        )));
    }
    let c = shape[2];
    let rows = shape[0] * shape[1];
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "cross_entropy: {} targets for {} label positions",
            targets.len(),
            rows
        )));
    }
    if class_weights.len() != c {
        return Err(Error::Shape(format!(
            "cross_entropy: {} class weights for {} classes",
            class_weights.len(),
            c
        )));
    }
    if class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Numeric(
            "cross_entropy: class weights must be finite and non-negative".to_string(),
        ));
    }
    for (n, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Config(format!(
                "cross_entropy: target {} at position {} out of range for {} classes",
                t, n, c
            )));
        }
    }

    let x = logits.data();
    let mut grad = Tensor::zeros(shape);
    let mut total_weight = 0.0;
    let mut loss_sum = 0.0;
    // First pass fixes the normalizer, second writes gradients.
    for (n, &y) in targets.iter().enumerate() {
        let row = &x[n * c..(n + 1) * c];
        let w = class_weights[y];
        total_weight += w;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss_sum += w * (log_sum - row[y]);
    }
    if total_weight <= 0.0 {
        return Ok((0.0, grad));
    }
    let g = grad.data_mut();
    for (n, &y) in targets.iter().enumerate() {
        let row = &x[n * c..(n + 1) * c];
        let w = class_weights[y];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for i in 0..c {
            let p = (row[i] - max).exp() / sum;
            let indicator = if i == y { 1.0 } else { 0.0 };
            g[n * c + i] = w * (p - indicator) / total_weight;
        }
    }
    Ok((loss_sum / total_weight, grad))
}
