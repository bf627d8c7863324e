//! Layer kinds and their forward/backward kernels.
//!
//! The layer set is fixed: 3x3 and 1x1 convolutions (zero padding, stride 1),
//! batch norm, ReLU, 2x2 max pooling, nearest-neighbor 2x upsampling, and a
//! per-pixel channel softmax. Kernels are plain loops over contiguous rows so
//! the compiler can vectorize them.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor4D;

/// Momentum of the batch-norm running-stat exponential update.
pub const BN_MOMENTUM: f64 = 0.1;
/// Added to the batch variance before the square root in train mode.
pub const BN_TRAIN_EPS: f64 = 1e-5;
/// Eval-mode floor for the stored running variance.
pub const BN_VAR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv3x3")]
    Conv3x3,
    #[serde(rename = "conv1x1")]
    Conv1x1,
    #[serde(rename = "batchnorm")]
    BatchNorm,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    #[serde(rename = "upsample2-nearest")]
    Upsample2Nearest,
    #[serde(rename = "softmax-channel")]
    SoftmaxChannel,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Upsample2Nearest => "upsample2-nearest",
            LayerKind::SoftmaxChannel => "softmax-channel",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            _ => 0,
        }
    }

    /// `(name, shape)` of every parameter tensor this layer stores, in
    /// serialization order. BN running stats count as stored parameters.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let k = self.kernel_size();
                vec![
                    ("weight", vec![self.out_channels, self.in_channels, k, k]),
                    ("bias", vec![self.out_channels]),
                ]
            }
            LayerKind::BatchNorm => {
                let c = self.out_channels;
                vec![
                    ("gamma", vec![c]),
                    ("beta", vec![c]),
                    ("running_mean", vec![c]),
                    ("running_var", vec![c]),
                ]
            }
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { weight: Tensor4D, bias: Vec<f64> },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    None,
}

/// Where a layer reads its input from. Multiple entries are concatenated
/// along the channel axis (U-Net skip connections).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeInput {
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "node")]
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub params: LayerParams,
    pub inputs: Vec<NodeInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

/// Direct convolution, zero padding `k/2`, stride 1. `weight` is
/// `(out, in, k, k)`; output spatial size equals input spatial size.
pub fn conv_forward(weight: &Tensor4D, bias: &[f64], x: &Tensor4D) -> Tensor4D {
    let [co, ci, kh, _kw] = weight.shape();
    let [n, _, h, w] = x.shape();
    let pad = kh / 2;
    let mut out = Tensor4D::zeros([n, co, h, w]);
    for b in 0..n {
        for o in 0..co {
            {
                let op = out.plane_mut(b, o);
                op.fill(bias[o]);
            }
            for c in 0..ci {
                let ip = x.plane(b, c);
                // split borrows: plane_mut on out, read-only on x
                let op = out.plane_mut(b, o);
                for ky in 0..kh {
                    for kx in 0..kh {
                        let wgt = weight.at(o, c, ky, kx);
                        accumulate_shifted(op, ip, wgt, h, w, ky as isize - pad as isize, kx as isize - pad as isize);
                    }
                }
            }
        }
    }
    out
}

/// `out[y][x] += wgt * in[y+dy][x+dx]` over the in-bounds region.
#[inline]
fn accumulate_shifted(out: &mut [f64], inp: &[f64], wgt: f64, h: usize, w: usize, dy: isize, dx: isize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize).min(h as isize - dy).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize).min(w as isize - dx).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let src_row = ((y as isize + dy) as usize) * w;
        let dst_row = y * w;
        let src = &inp[src_row + ((x0 as isize + dx) as usize)..src_row + ((x1 as isize + dx) as usize)];
        let dst = &mut out[dst_row + x0..dst_row + x1];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += wgt * s;
        }
    }
}

/// Gradient of `conv_forward` w.r.t. its input.
pub fn conv_backward_input(weight: &Tensor4D, grad_out: &Tensor4D, in_channels: usize) -> Tensor4D {
    let [co, _ci, kh, _] = weight.shape();
    let [n, _, h, w] = grad_out.shape();
    let pad = kh / 2;
    let mut gx = Tensor4D::zeros([n, in_channels, h, w]);
    for b in 0..n {
        for c in 0..in_channels {
            let gp = gx.plane_mut(b, c);
            for o in 0..co {
                let gop = grad_out.plane(b, o);
                for ky in 0..kh {
                    for kx in 0..kh {
                        let wgt = weight.at(o, c, ky, kx);
                        // in[u][v] fed out[u-(ky-pad)][v-(kx-pad)]
                        accumulate_shifted(gp, gop, wgt, h, w, pad as isize - ky as isize, pad as isize - kx as isize);
                    }
                }
            }
        }
    }
    gx
}

/// Gradients of `conv_forward` w.r.t. weight and bias.
pub fn conv_backward_params(x: &Tensor4D, grad_out: &Tensor4D, kernel: usize) -> (Tensor4D, Vec<f64>) {
    let [n, ci, h, w] = x.shape();
    let co = grad_out.channels();
    let pad = kernel / 2;
    let mut gw = Tensor4D::zeros([co, ci, kernel, kernel]);
    let mut gb = vec![0.0; co];
    for b in 0..n {
        for o in 0..co {
            let gop = grad_out.plane(b, o);
            gb[o] += gop.iter().sum::<f64>();
            for c in 0..ci {
                let ip = x.plane(b, c);
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let dy = ky as isize - pad as isize;
                        let dx = kx as isize - pad as isize;
                        let idx = gw.idx(o, c, ky, kx);
                        gw.data_mut()[idx] += dot_shifted(gop, ip, h, w, dy, dx);
                    }
                }
            }
        }
    }
    (gw, gb)
}

/// `sum_{y,x} a[y][x] * b[y+dy][x+dx]` over the in-bounds region.
#[inline]
fn dot_shifted(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize).min(h as isize - dy).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize).min(w as isize - dx).max(0) as usize;
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let ra = &a[y * w + x0..y * w + x1];
        let rb_start = ((y as isize + dy) as usize) * w + ((x0 as isize + dx) as usize);
        let rb = &b[rb_start..rb_start + (x1 - x0)];
        for (va, vb) in ra.iter().zip(rb) {
            acc += va * vb;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Batch norm
// ---------------------------------------------------------------------------

pub struct BnForward {
    pub y: Tensor4D,
    pub xhat: Tensor4D,
    pub inv_std: Vec<f64>,
}

/// Train-mode BN: normalizes with biased batch statistics and updates the
/// running stats in place with momentum [`BN_MOMENTUM`].
pub fn batchnorm_forward_train(
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    x: &Tensor4D,
) -> BnForward {
    let [n, c, h, w] = x.shape();
    let m = (n * h * w) as f64;
    let mut y = Tensor4D::zeros([n, c, h, w]);
    let mut xhat = Tensor4D::zeros([n, c, h, w]);
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for b in 0..n {
            for v in x.plane(b, ch) {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sumsq / m - mean * mean).max(0.0);
        let istd = 1.0 / (var + BN_TRAIN_EPS).sqrt();
        inv_std[ch] = istd;
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean;
        running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * var;
        apply_bn_channel(x, &mut xhat, &mut y, ch, mean, istd, gamma[ch], beta[ch]);
    }
    BnForward { y, xhat, inv_std }
}

/// Same normalization as train mode but with caller-supplied statistics and
/// no running-stat update. Used by the test-time routed path, which computes
/// stats from the test batch itself.
pub fn batchnorm_forward_stats(gamma: &[f64], beta: &[f64], x: &Tensor4D) -> BnForward {
    let [n, c, h, w] = x.shape();
    let m = (n * h * w) as f64;
    let mut y = Tensor4D::zeros([n, c, h, w]);
    let mut xhat = Tensor4D::zeros([n, c, h, w]);
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for b in 0..n {
            for v in x.plane(b, ch) {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sumsq / m - mean * mean).max(0.0);
        let istd = 1.0 / (var + BN_TRAIN_EPS).sqrt();
        inv_std[ch] = istd;
        apply_bn_channel(x, &mut xhat, &mut y, ch, mean, istd, gamma[ch], beta[ch]);
    }
    BnForward { y, xhat, inv_std }
}

/// Eval-mode BN: stored running stats, variance floored at [`BN_VAR_FLOOR`].
pub fn batchnorm_forward_eval(
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    x: &Tensor4D,
) -> BnForward {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor4D::zeros([n, c, h, w]);
    let mut xhat = Tensor4D::zeros([n, c, h, w]);
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let istd = 1.0 / running_var[ch].max(BN_VAR_FLOOR).sqrt();
        inv_std[ch] = istd;
        apply_bn_channel(x, &mut xhat, &mut y, ch, running_mean[ch], istd, gamma[ch], beta[ch]);
    }
    BnForward { y, xhat, inv_std }
}

#[inline]
fn apply_bn_channel(
    x: &Tensor4D,
    xhat: &mut Tensor4D,
    y: &mut Tensor4D,
    ch: usize,
    mean: f64,
    istd: f64,
    gamma: f64,
    beta: f64,
) {
    for b in 0..x.batch() {
        let xp = x.plane(b, ch);
        let hp_start = xhat.idx(b, ch, 0, 0);
        let yp_start = y.idx(b, ch, 0, 0);
        let hw = x.height() * x.width();
        let hp = &mut xhat.data_mut()[hp_start..hp_start + hw];
        for (hv, xv) in hp.iter_mut().zip(xp) {
            *hv = (xv - mean) * istd;
        }
        let hp = &xhat.data()[hp_start..hp_start + hw];
        let yp = &mut y.data_mut()[yp_start..yp_start + hw];
        for (yv, hv) in yp.iter_mut().zip(hp) {
            *yv = gamma * hv + beta;
        }
    }
}

pub struct BnGrads {
    pub gx: Tensor4D,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// BN backward. `batch_stats` says whether the forward normalized with batch
/// statistics (train mode / routed test path) or frozen stats (eval).
pub fn batchnorm_backward(
    gamma: &[f64],
    xhat: &Tensor4D,
    inv_std: &[f64],
    grad_out: &Tensor4D,
    batch_stats: bool,
) -> BnGrads {
    let [n, c, h, w] = xhat.shape();
    let m = (n * h * w) as f64;
    let mut gx = Tensor4D::zeros([n, c, h, w]);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            let gp = grad_out.plane(b, ch);
            let hp = xhat.plane(b, ch);
            for (g, hv) in gp.iter().zip(hp) {
                sum_dy += g;
                sum_dy_xhat += g * hv;
            }
        }
        dbeta[ch] = sum_dy;
        dgamma[ch] = sum_dy_xhat;
        let g_istd = gamma[ch] * inv_std[ch];
        if batch_stats {
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for b in 0..n {
                let start = gx.idx(b, ch, 0, 0);
                let hw = h * w;
                let gp = grad_out.plane(b, ch);
                let hp = xhat.plane(b, ch);
                let out = &mut gx.data_mut()[start..start + hw];
                for ((o, g), hv) in out.iter_mut().zip(gp).zip(hp) {
                    *o = g_istd * (g - mean_dy - hv * mean_dy_xhat);
                }
            }
        } else {
            for b in 0..n {
                let start = gx.idx(b, ch, 0, 0);
                let hw = h * w;
                let gp = grad_out.plane(b, ch);
                let out = &mut gx.data_mut()[start..start + hw];
                for (o, g) in out.iter_mut().zip(gp) {
                    *o = g_istd * g;
                }
            }
        }
    }
    BnGrads { gx, dgamma, dbeta }
}

// ---------------------------------------------------------------------------
// Parameter-free layers
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor4D) -> Tensor4D {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

pub fn relu_backward(y: &Tensor4D, grad_out: &Tensor4D) -> Tensor4D {
    let mut gx = grad_out.clone();
    for (g, v) in gx.data_mut().iter_mut().zip(y.data()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in scan
/// order, recorded in `argmax` for the backward pass.
pub fn maxpool2_forward(x: &Tensor4D) -> Result<(Tensor4D, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::InvalidArgument(format!(
            "maxpool2 needs even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4D::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let mut oi = 0;
    for b in 0..n {
        for ch in 0..c {
            let ip = x.plane(b, ch);
            let base = x.idx(b, ch, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = ip[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if ip[idx] > best {
                            best = ip[idx];
                            best_idx = idx;
                        }
                    }
                    let k = y.idx(b, ch, oy, ox);
                    y.data_mut()[k] = best;
                    argmax[oi] = base + best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((y, argmax))
}

pub fn maxpool2_backward(argmax: &[usize], grad_out: &Tensor4D, in_shape: [usize; 4]) -> Tensor4D {
    let mut gx = Tensor4D::zeros(in_shape);
    for (g, &src) in grad_out.data().iter().zip(argmax) {
        gx.data_mut()[src] += g;
    }
    gx
}

pub fn upsample2_forward(x: &Tensor4D) -> Tensor4D {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor4D::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x.at(b, ch, yy, xx);
                    y.set(b, ch, 2 * yy, 2 * xx, v);
                    y.set(b, ch, 2 * yy, 2 * xx + 1, v);
                    y.set(b, ch, 2 * yy + 1, 2 * xx, v);
                    y.set(b, ch, 2 * yy + 1, 2 * xx + 1, v);
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(grad_out: &Tensor4D) -> Tensor4D {
    let [n, c, h2, w2] = grad_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor4D::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let s = grad_out.at(b, ch, 2 * yy, 2 * xx)
                        + grad_out.at(b, ch, 2 * yy, 2 * xx + 1)
                        + grad_out.at(b, ch, 2 * yy + 1, 2 * xx)
                        + grad_out.at(b, ch, 2 * yy + 1, 2 * xx + 1);
                    gx.set(b, ch, yy, xx, s);
                }
            }
        }
    }
    gx
}

/// Per-pixel softmax over the channel axis, max-shifted for stability.
pub fn softmax_channel_forward(x: &Tensor4D) -> Tensor4D {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor4D::zeros([n, c, h, w]);
    let hw = h * w;
    for b in 0..n {
        for i in 0..hw {
            let mut maxv = f64::NEG_INFINITY;
            for ch in 0..c {
                maxv = maxv.max(x.plane(b, ch)[i]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                denom += (x.plane(b, ch)[i] - maxv).exp();
            }
            for ch in 0..c {
                let v = (x.plane(b, ch)[i] - maxv).exp() / denom;
                let k = y.idx(b, ch, 0, 0) + i;
                y.data_mut()[k] = v;
            }
        }
    }
    y
}

pub fn softmax_channel_backward(probs: &Tensor4D, grad_out: &Tensor4D) -> Tensor4D {
    let [n, c, h, w] = probs.shape();
    let mut gx = Tensor4D::zeros([n, c, h, w]);
    let hw = h * w;
    for b in 0..n {
        for i in 0..hw {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += grad_out.plane(b, ch)[i] * probs.plane(b, ch)[i];
            }
            for ch in 0..c {
                let p = probs.plane(b, ch)[i];
                let g = grad_out.plane(b, ch)[i];
                let k = gx.idx(b, ch, 0, 0) + i;
                gx.data_mut()[k] = p * (g - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor4D {
        Tensor4D::from_vec(shape, data).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        // centered delta: conv output equals input everywhere
        let mut w = Tensor4D::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let x = t([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let y = conv_forward(&w, &[0.0], &x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv1x1_is_channel_matmul() {
        let w = t([2, 2, 1, 1], vec![1., 2., 3., 4.]);
        let x = t([1, 2, 1, 1], vec![5., 7.]);
        let y = conv_forward(&w, &[0.0, 0.0], &x);
        assert_eq!(y.data(), &[5. + 14., 15. + 28.]);
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let x = t([1, 1, 2, 2], vec![3., 3., 3., 3.]);
        let (y, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor4D::zeros([1, 1, 3, 4]);
        assert!(maxpool2_forward(&x).is_err());
    }

    #[test]
    fn upsample_roundtrip_grad_sums() {
        let x = t([1, 1, 1, 1], vec![2.0]);
        let y = upsample2_forward(&x);
        assert_eq!(y.data(), &[2.0; 4]);
        let g = upsample2_backward(&t([1, 1, 2, 2], vec![1., 2., 3., 4.]));
        assert_eq!(g.data(), &[10.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = t([1, 3, 1, 2], vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.5]);
        let p = softmax_channel_forward(&x);
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| p.at(0, c, 0, i)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
