//! Forward and backward kernels shared by the tape and by inference.
//!
//! Activations use `[batch, channels, length]` layout; matrices are row-major.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar};

pub const BN_EPS: f64 = 1e-5;

/// Output length of a 1-D convolution, or an error when it would be < 1.
pub fn conv_out_len(input_len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument("kernel and stride must be positive".into()));
    }
    let span = input_len as i64 + 2 * padding as i64 - kernel as i64;
    let len = span.div_euclid(stride as i64) + 1;
    if span < 0 || len < 1 {
        return Err(Error::EmptyExtent {
            layer: format!("conv(k={kernel}, s={stride}, p={padding}) on length {input_len}"),
            length: if span < 0 { 0 } else { len },
        });
    }
    Ok(len as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_len: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_channels * self.kernel
    }
    fn rows(&self) -> usize {
        self.batch * self.out_len
    }
}

/// Unfolds input windows into a `[batch*out_len, in_channels*kernel]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * g.in_len..(b + 1) * g.in_channels * g.in_len];
        for j in 0..g.out_len {
            let row = &mut cols[(b * g.out_len + j) * patch..(b * g.out_len + j + 1) * patch];
            let start = (j * g.stride) as isize - g.padding as isize;
            for c in 0..g.in_channels {
                let xc = &xb[c * g.in_len..(c + 1) * g.in_len];
                for k in 0..g.kernel {
                    let pos = start + k as isize;
                    if pos >= 0 && (pos as usize) < g.in_len {
                        row[c * g.kernel + k] = xc[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Returns the output `[batch, out_channels, out_len]` and the unfolded input used by backward.
pub fn conv1d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let rows = g.rows();
    let mut y = vec![T::zero(); rows * g.out_channels];
    gemm(
        rows,
        g.patch(),
        g.out_channels,
        &cols,
        false,
        weight,
        true,
        T::zero(),
        &mut y,
    );
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_len];
    for b in 0..g.batch {
        for j in 0..g.out_len {
            let yr = &y[(b * g.out_len + j) * g.out_channels..(b * g.out_len + j + 1) * g.out_channels];
            for (o, &v) in yr.iter().enumerate() {
                out[(b * g.out_channels + o) * g.out_len + j] = v + bias[o];
            }
        }
    }
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv1d_backward<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    weight: &[T],
    g: &ConvGeometry,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let rows = g.rows();
    let patch = g.patch();
    let mut dy = vec![T::zero(); rows * g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let src = &grad_out[(b * g.out_channels + o) * g.out_len..(b * g.out_channels + o + 1) * g.out_len];
            for (j, &v) in src.iter().enumerate() {
                dy[(b * g.out_len + j) * g.out_channels + o] = v;
            }
        }
    }
    let (weight_grad, bias_grad) = if need_params {
        let mut dw = vec![T::zero(); g.out_channels * patch];
        gemm(g.out_channels, rows, patch, &dy, true, cols, false, T::zero(), &mut dw);
        let mut db = vec![T::zero(); g.out_channels];
        for r in dy.chunks(g.out_channels) {
            for (acc, &v) in db.iter_mut().zip(r) {
                *acc += v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let input_grad = need_input.then(|| {
        let mut dcols = vec![T::zero(); rows * patch];
        gemm(
            rows,
            g.out_channels,
            patch,
            &dy,
            false,
            weight,
            false,
            T::zero(),
            &mut dcols,
        );
        let mut dx = vec![T::zero(); g.batch * g.in_channels * g.in_len];
        for b in 0..g.batch {
            for j in 0..g.out_len {
                let row = &dcols[(b * g.out_len + j) * patch..(b * g.out_len + j + 1) * patch];
                let start = (j * g.stride) as isize - g.padding as isize;
                for c in 0..g.in_channels {
                    let base = (b * g.in_channels + c) * g.in_len;
                    for k in 0..g.kernel {
                        let pos = start + k as isize;
                        if pos >= 0 && (pos as usize) < g.in_len {
                            dx[base + pos as usize] += row[c * g.kernel + k];
                        }
                    }
                }
            }
        }
        dx
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// `y = x * w^T + b` with `x: [batch, in]`, `w: [out, in]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * outputs];
    for row in y.chunks_mut(outputs) {
        row.copy_from_slice(bias);
    }
    gemm(batch, inputs, outputs, x, false, weight, true, T::one(), &mut y);
    y
}

pub struct LinearGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    weight: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    need_input: bool,
    need_params: bool,
) -> LinearGrads<T> {
    let (weight_grad, bias_grad) = if need_params {
        let mut dw = vec![T::zero(); outputs * inputs];
        gemm(outputs, batch, inputs, grad_out, true, x, false, T::zero(), &mut dw);
        let mut db = vec![T::zero(); outputs];
        for r in grad_out.chunks(outputs) {
            for (acc, &v) in db.iter_mut().zip(r) {
                *acc += v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let input_grad = need_input.then(|| {
        let mut dx = vec![T::zero(); batch * inputs];
        gemm(
            batch,
            outputs,
            inputs,
            grad_out,
            false,
            weight,
            false,
            T::zero(),
            &mut dx,
        );
        dx
    });
    LinearGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Per-channel statistics cached by a training-mode batch-norm forward.
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

/// Training-mode batch norm over `[batch, channels, len]` using batch statistics.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<T>, BatchNormCache<T>) {
    let count = T::from_usize(batch * len).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * channels + c) * len..(b * channels + c + 1) * len]
                .iter()
                .copied()
                .sum();
        }
        let mu = s / count;
        let mut ss = T::zero();
        for b in 0..batch {
            for &v in &x[(b * channels + c) * len..(b * channels + c + 1) * len] {
                ss += (v - mu) * (v - mu);
            }
        }
        mean[c] = mu;
        var[c] = ss / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub struct BatchNormGrads<T> {
    pub input: Option<Vec<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_train_backward<T: Scalar>(
    grad_out: &[T],
    cache: &BatchNormCache<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    len: usize,
    need_input: bool,
) -> BatchNormGrads<T> {
    let count = T::from_usize(batch * len).unwrap();
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                dbeta[c] += grad_out[i];
                dgamma[c] += grad_out[i] * cache.xhat[i];
            }
        }
    }
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); grad_out.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * len;
                let scale = gamma[c] * cache.inv_std[c] / count;
                for i in off..off + len {
                    dx[i] = scale * (count * grad_out[i] - dbeta[c] - cache.xhat[i] * dgamma[c]);
                }
            }
        }
        dx
    });
    BatchNormGrads {
        input,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Eval-mode batch norm with fixed statistics. Returns the output and the normalized input.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                let h = (x[i] - running_mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Row-wise softmax of `[rows, width]` logits divided by `temperature`.
pub fn softmax_rows<T: Scalar>(logits: &[T], width: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (src, dst) in logits.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s / temperature - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax_rows<T: Scalar>(logits: &[T], width: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (src, dst) in logits.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v / temperature));
        let lse = src.iter().map(|&s| (s / temperature - max).exp()).sum::<T>().ln() + max;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s / temperature - lse;
        }
    }
    out
}

/// Takes the first `cols` columns of a `[rows, width]` matrix.
pub fn leading_columns<T: Scalar>(m: &[T], width: usize, cols: usize) -> Vec<T> {
    m.chunks(width).flat_map(|r| r[..cols].iter().copied()).collect()
}
