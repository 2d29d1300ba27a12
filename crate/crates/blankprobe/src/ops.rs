//! Primitive network operations: forward kernels, backward kernels, and
//! shape-checked public wrappers.
//!
//! All reductions accumulate in f64 and round to f32 once at the end, which
//! keeps finite-difference gradient checks tight. Kernels iterate in a fixed
//! order, so results are bit-identical across runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output length of a convolution along one axis.
pub fn conv_out_len(in_len: usize, k: usize, stride: usize, padding: usize) -> usize {
    (in_len + 2 * padding - k) / stride + 1
}

/// Half-open range of output positions whose receptive field, offset by
/// `k_off`, lands inside the padded input.
fn conv_bounds(
    out_len: usize,
    stride: usize,
    k_off: usize,
    pad: usize,
    in_len: usize,
) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi_raw = in_len - 1 + pad;
    let hi = if hi_raw >= k_off {
        ((hi_raw - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi)
}

pub(crate) struct ConvDims {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        bias_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvDims> {
        let [c, h, w] = three(input_shape, "conv2d input")?;
        let (f, wc, kh, kw) = match weight_shape {
            [f, wc, kh, kw] => (*f, *wc, *kh, *kw),
            other => {
                return Err(Error::Dimension {
                    context: "conv2d kernels",
                    expected: "rank-4 [F,C,kh,kw]".into(),
                    found: format!("{other:?}"),
                })
            }
        };
        if wc != c {
            return Err(Error::Dimension {
                context: "conv2d kernels",
                expected: format!("channel axis {c}"),
                found: format!("channel axis {wc}"),
            });
        }
        if bias_shape != [f] {
            return Err(Error::Dimension {
                context: "conv2d bias",
                expected: format!("[{f}]"),
                found: format!("{bias_shape:?}"),
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension {
                context: "conv2d kernels",
                expected: format!(
                    "kernel within padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
                found: format!("{kh}x{kw}"),
            });
        }
        Ok(ConvDims {
            channels: c,
            in_h: h,
            in_w: w,
            filters: f,
            k_h: kh,
            k_w: kw,
            out_h: conv_out_len(h, kh, stride, padding),
            out_w: conv_out_len(w, kw, stride, padding),
            stride,
            padding,
        })
    }
}

fn three(shape: &[usize], context: &'static str) -> Result<[usize; 3]> {
    match shape {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(Error::Dimension {
            context,
            expected: "rank-3 [C,H,W]".into(),
            found: format!("{other:?}"),
        }),
    }
}

macro_rules! conv2d_forward_impl {
    ($name:ident, $t:ty) => {
        pub(crate) fn $name(input: &[$t], weights: &[$t], bias: &[$t], d: &ConvDims) -> Vec<$t> {
            let (s, p) = (d.stride, d.padding);
            let mut acc = vec![0f64; d.filters * d.out_h * d.out_w];
            for f in 0..d.filters {
                for c in 0..d.channels {
                    for ky in 0..d.k_h {
                        let (oy_lo, oy_hi) = conv_bounds(d.out_h, s, ky, p, d.in_h);
                        for kx in 0..d.k_w {
                            let w =
                                weights[((f * d.channels + c) * d.k_h + ky) * d.k_w + kx] as f64;
                            let (ox_lo, ox_hi) = conv_bounds(d.out_w, s, kx, p, d.in_w);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let in_row = &input[(c * d.in_h + iy) * d.in_w..][..d.in_w];
                                let out_row =
                                    &mut acc[(f * d.out_h + oy) * d.out_w..][..d.out_w];
                                if s == 1 {
                                    let ix0 = ox_lo + kx - p;
                                    let n = ox_hi - ox_lo;
                                    let src = &in_row[ix0..ix0 + n];
                                    let dst = &mut out_row[ox_lo..ox_hi];
                                    for i in 0..n {
                                        dst[i] += w * src[i] as f64;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * s + kx - p;
                                        out_row[ox] += w * in_row[ix] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let plane = d.out_h * d.out_w;
            acc.iter()
                .enumerate()
                .map(|(i, &v)| (v + bias[i / plane] as f64) as $t)
                .collect()
        }
    };
}

conv2d_forward_impl!(conv2d_forward, f32);
conv2d_forward_impl!(conv2d_forward_f64, f64);

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    input: &[f32],
    weights: &[f32],
    grad_out: &[f32],
    d: &ConvDims,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (s, p) = (d.stride, d.padding);
    let mut d_in = if want_input {
        vec![0f64; d.channels * d.in_h * d.in_w]
    } else {
        Vec::new()
    };
    let mut d_w = vec![0f64; weights.len()];
    let mut d_b = vec![0f64; d.filters];
    if want_params {
        for f in 0..d.filters {
            let mut acc = 0f64;
            for g in &grad_out[f * d.out_h * d.out_w..][..d.out_h * d.out_w] {
                acc += *g as f64;
            }
            d_b[f] = acc;
        }
    }
    for f in 0..d.filters {
        for c in 0..d.channels {
            for ky in 0..d.k_h {
                let (oy_lo, oy_hi) = conv_bounds(d.out_h, s, ky, p, d.in_h);
                for kx in 0..d.k_w {
                    let widx = ((f * d.channels + c) * d.k_h + ky) * d.k_w + kx;
                    let w = weights[widx] as f64;
                    let (ox_lo, ox_hi) = conv_bounds(d.out_w, s, kx, p, d.in_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut w_acc = 0f64;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let g_row = &grad_out[(f * d.out_h + oy) * d.out_w..][..d.out_w];
                        let in_base = (c * d.in_h + iy) * d.in_w;
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            let n = ox_hi - ox_lo;
                            let g = &g_row[ox_lo..ox_hi];
                            if want_params {
                                let x = &input[in_base + ix0..][..n];
                                for i in 0..n {
                                    w_acc += g[i] as f64 * x[i] as f64;
                                }
                            }
                            if want_input {
                                let di = &mut d_in[in_base + ix0..][..n];
                                for i in 0..n {
                                    di[i] += w * g[i] as f64;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - p;
                                let g = g_row[ox] as f64;
                                if want_params {
                                    w_acc += g * input[in_base + ix] as f64;
                                }
                                if want_input {
                                    d_in[in_base + ix] += w * g;
                                }
                            }
                        }
                    }
                    d_w[widx] = w_acc;
                }
            }
        }
    }
    ConvGrads {
        input: want_input.then(|| d_in.iter().map(|&v| v as f32).collect()),
        weights: d_w.iter().map(|&v| v as f32).collect(),
        bias: d_b.iter().map(|&v| v as f32).collect(),
    }
}

macro_rules! dense_forward_impl {
    ($name:ident, $t:ty) => {
        pub(crate) fn $name(input: &[$t], weights: &[$t], bias: &[$t], m: usize) -> Vec<$t> {
            let n = input.len();
            let mut out = Vec::with_capacity(m);
            for i in 0..m {
                let row = &weights[i * n..][..n];
                let mut acc = bias[i] as f64;
                for j in 0..n {
                    acc += row[j] as f64 * input[j] as f64;
                }
                out.push(acc as $t);
            }
            out
        }
    };
}

dense_forward_impl!(dense_forward, f32);
dense_forward_impl!(dense_forward_f64, f64);

pub(crate) struct DenseGrads {
    pub input: Option<Vec<f32>>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn dense_backward(
    input: &[f32],
    weights: &[f32],
    grad_out: &[f32],
    want_input: bool,
    want_params: bool,
) -> DenseGrads {
    let n = input.len();
    let m = grad_out.len();
    let input_grad = want_input.then(|| {
        let mut d_in = vec![0f64; n];
        for i in 0..m {
            let g = grad_out[i] as f64;
            let row = &weights[i * n..][..n];
            for j in 0..n {
                d_in[j] += g * row[j] as f64;
            }
        }
        d_in.iter().map(|&v| v as f32).collect()
    });
    let mut d_w = vec![0f32; m * n];
    let mut d_b = vec![0f32; m];
    if want_params {
        for i in 0..m {
            let g = grad_out[i];
            d_b[i] = g;
            let row = &mut d_w[i * n..][..n];
            for j in 0..n {
                row[j] = g * input[j];
            }
        }
    }
    DenseGrads {
        input: input_grad,
        weights: d_w,
        bias: d_b,
    }
}

pub(crate) fn relu_forward(input: &[f32]) -> Vec<f32> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

pub(crate) fn relu_backward(output: &[f32], grad_out: &[f32]) -> Vec<f32> {
    // Subgradient at 0 is 0: gradient flows only where the output is positive.
    output
        .iter()
        .zip(grad_out)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2x2 max pooling with stride 2. Returns pooled values and, per output
/// cell, the flat input index of the winner (first of ties in scan order).
pub(crate) fn maxpool2_forward(input: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut winners = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                winners.push(best);
            }
        }
    }
    (out, winners)
}

pub(crate) fn maxpool2_backward(winners: &[usize], grad_out: &[f32], in_len: usize) -> Vec<f32> {
    let mut d_in = vec![0f32; in_len];
    for (slot, &g) in winners.iter().zip(grad_out) {
        d_in[*slot] += g;
    }
    d_in
}

/// Numerically stable softmax (max subtraction, f64 accumulation).
pub(crate) fn softmax_forward(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// Cross-entropy from logits via log-sum-exp; equals -ln(softmax[label]) but
/// never underflows.
pub(crate) fn cross_entropy_from_logits(logits: &[f32], label: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    sum.ln() + max - logits[label] as f64
}

pub(crate) fn cross_entropy_from_logits_f64(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    sum.ln() + max - logits[label]
}

/// f64 max pooling used by the full-precision evaluation path.
pub(crate) fn maxpool2_forward_f64(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                let m = input[base]
                    .max(input[base + 1])
                    .max(input[base + w])
                    .max(input[base + w + 1]);
                out.push(m);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Public shape-checked primitives.
// ---------------------------------------------------------------------------

/// Cross-correlation of a [C,H,W] input with [F,C,kh,kw] kernels.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let d = ConvDims::resolve(input.shape(), kernels.shape(), bias.shape(), stride, padding)?;
    let out = conv2d_forward(input.data(), kernels.data(), bias.data(), &d);
    Tensor::new(vec![d.filters, d.out_h, d.out_w], out)
}

/// Fully connected layer: `out[i] = sum_j weights[i,j] * input[j] + bias[i]`.
/// The input is viewed as a flat row-major vector.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        other => {
            return Err(Error::Dimension {
                context: "dense weights",
                expected: "rank-2 [m,n]".into(),
                found: format!("{other:?}"),
            })
        }
    };
    if input.len() != n {
        return Err(Error::Dimension {
            context: "dense input",
            expected: format!("{n} elements"),
            found: format!("{} elements", input.len()),
        });
    }
    if bias.shape() != [m] {
        return Err(Error::Dimension {
            context: "dense bias",
            expected: format!("[{m}]"),
            found: format!("{:?}", bias.shape()),
        });
    }
    Tensor::new(vec![m], dense_forward(input.data(), weights.data(), bias.data(), m))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_parts(input.shape().to_vec(), relu_forward(input.data()))
}

/// Max pooling over non-overlapping 2x2 windows; spatial dims must be even.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let [c, h, w] = three(input.shape(), "maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension {
            context: "maxpool2 input",
            expected: "even spatial dimensions".into(),
            found: format!("{h}x{w}"),
        });
    }
    let (out, _) = maxpool2_forward(input.data(), c, h, w);
    Tensor::new(vec![c, h / 2, w / 2], out)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 1 {
        return Err(Error::Dimension {
            context: "softmax logits",
            expected: "rank-1".into(),
            found: format!("{:?}", logits.shape()),
        });
    }
    Tensor::new(logits.shape().to_vec(), softmax_forward(logits.data()))
}

/// `-ln(probs[label])` for a probability vector.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f32> {
    if label >= probs.len() {
        return Err(Error::Index {
            context: "cross_entropy label",
            index: label,
            len: probs.len(),
        });
    }
    let loss = -(probs.data()[label] as f64).ln();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "cross-entropy diverged: probability {} at label {label}",
            probs.data()[label]
        )));
    }
    Ok(loss as f32)
}
