//! Forward and backward kernels for the five layer kinds plus the loss.
//!
//! Every kernel accepts either a single sample (`C×H×W`, or `F` for dense)
//! or a batch with a leading dimension, and returns a tensor of the same
//! rank. Batches are processed sample by sample in index order, so results
//! do not depend on how samples are grouped.

use super::scalar::{matmul, Op, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Splits an image tensor into `(batch, channels, height, width, batched)`.
fn image_dims<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize, bool)> {
    match *t.shape() {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        ref other => Err(Error::Shape(format!(
            "{what} must be (C, H, W) or (N, C, H, W), got {other:?}"
        ))),
    }
}

fn with_batch(batched: bool, n: usize, rest: &[usize]) -> Vec<usize> {
    let mut shape = Vec::with_capacity(rest.len() + 1);
    if batched {
        shape.push(n);
    }
    shape.extend_from_slice(rest);
    shape
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output spatial size of a convolution, or a descriptive error.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be at least 1".into()));
    }
    if kernel == 0 {
        return Err(Error::Shape("kernel size must be at least 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeom, bool)> {
    let (n, c_in, h, w, batched) = image_dims("conv2d input", input)?;
    let [c_out, wc_in, kh, kw] = *weights.shape() else {
        return Err(Error::Shape(format!(
            "conv2d weights must be (C_out, C_in, k, k), got {:?}",
            weights.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv2d input channels: input has {c_in}, weights expect {wc_in}"
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!(
            "conv2d kernel must be square, got {kh}×{kw}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv2d bias must be ({c_out}), got {:?}",
            bias.shape()
        )));
    }
    let h_out = conv_output_size(h, kh, stride, padding)
        .map_err(|e| Error::Shape(format!("conv2d height: {e}")))?;
    let w_out = conv_output_size(w, kw, stride, padding)
        .map_err(|e| Error::Shape(format!("conv2d width: {e}")))?;
    Ok((
        n,
        c_out,
        ConvGeom {
            c_in,
            h,
            w,
            k: kh,
            stride,
            pad: padding,
            h_out,
            w_out,
        },
        batched,
    ))
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] = plane[base + ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with square kernels and zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c_out, g, batched) = conv_geom(input, weights, bias, stride, padding)?;
    let kk = g.cols_rows();
    let p = g.positions();
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![T::zero(); kk * p];
    let mut out = vec![T::zero(); n * c_out * p];
    for s in 0..n {
        im2col(&g, &input.data()[s * in_len..(s + 1) * in_len], &mut cols);
        let y = &mut out[s * c_out * p..(s + 1) * c_out * p];
        for (co, b) in bias.data().iter().enumerate() {
            y[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *b);
        }
        matmul(c_out, kk, p, weights.data(), Op::N, &cols, Op::N, y, true);
    }
    Tensor::from_vec(&with_batch(batched, n, &[c_out, g.h_out, g.w_out]), out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c_out = weights.shape().first().copied().unwrap_or(0);
    let zero_bias = Tensor::zeros(&[c_out]);
    let (n, c_out, g, batched) = conv_geom(input, weights, &zero_bias, stride, padding)?;
    let expected = with_batch(batched, n, &[c_out, g.h_out, g.w_out]);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient must be {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let kk = g.cols_rows();
    let p = g.positions();
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[c_out]);
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        let gy = &grad_out.data()[s * c_out * p..(s + 1) * c_out * p];
        im2col(&g, x, &mut cols);
        matmul(c_out, p, kk, gy, Op::N, &cols, Op::T, dw.data_mut(), true);
        for (co, b) in db.data_mut().iter_mut().enumerate() {
            *b = gy[co * p..(co + 1) * p].iter().fold(*b, |acc, v| acc + *v);
        }
        matmul(kk, c_out, p, weights.data(), Op::T, gy, Op::N, &mut dcols, false);
        col2im(&g, &dcols, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    Ok((Tensor::from_vec(input.shape(), dx)?, dw, db))
}

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat index of the winning input element within its sample.
/// Ties go to the first maximal element in row-major window order.
pub fn maxpool2x2_with_argmax<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w, batched) = image_dims("maxpool input", input)?;
    if h % 2 != 0 {
        return Err(Error::Shape(format!("maxpool height must be even, got {h}")));
    }
    if w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool width must be even, got {w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let in_len = c * h * w;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for s in 0..n {
        let x = &input.data()[s * in_len..(s + 1) * in_len];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let top = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&with_batch(batched, n, &[c, ho, wo]), out)?,
        arg,
    ))
}

pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2x2_with_argmax(input).map(|(t, _)| t)
}

/// Routes each upstream value to the recorded argmax position.
pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "maxpool upstream gradient has {} values, argmax has {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let total: usize = input_shape.iter().product();
    let per_out = argmax.len();
    let n = match input_shape.len() {
        4 => input_shape[0],
        _ => 1,
    };
    let in_len = total / n.max(1);
    let out_len = per_out / n.max(1);
    let mut dx = vec![T::zero(); total];
    for s in 0..n {
        for j in 0..out_len {
            let o = s * out_len + j;
            let i = s * in_len + argmax[o] as usize;
            dx[i] = dx[i] + grad_out.data()[o];
        }
    }
    Tensor::from_vec(input_shape, dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu upstream gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn dense_dims<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, bool)> {
    let (n, f, batched) = match *input.shape() {
        [f] => (1, f, false),
        [n, f] => (n, f, true),
        ref other => {
            return Err(Error::Shape(format!(
                "dense input must be (F) or (N, F), got {other:?}"
            )))
        }
    };
    let [out, wf] = *weights.shape() else {
        return Err(Error::Shape(format!(
            "dense weights must be (out, F), got {:?}",
            weights.shape()
        )));
    };
    if wf != f {
        return Err(Error::Shape(format!(
            "dense input features: input has {f}, weights expect {wf}"
        )));
    }
    if bias.shape() != [out] {
        return Err(Error::Shape(format!(
            "dense bias must be ({out}), got {:?}",
            bias.shape()
        )));
    }
    Ok((n, f, out, batched))
}

pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, out, batched) = dense_dims(input, weights, bias)?;
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    matmul(n, f, out, input.data(), Op::N, weights.data(), Op::T, &mut y, true);
    Tensor::from_vec(&with_batch(batched, n, &[out]), y)
}

/// Gradients of [`dense`] with respect to input, weights and bias.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let out_features = weights.shape().first().copied().unwrap_or(0);
    let zero_bias = Tensor::zeros(&[out_features]);
    let (n, f, out, batched) = dense_dims(input, weights, &zero_bias)?;
    let expected = with_batch(batched, n, &[out]);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::Shape(format!(
            "dense upstream gradient must be {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let mut dx = vec![T::zero(); n * f];
    matmul(n, out, f, grad_out.data(), Op::N, weights.data(), Op::N, &mut dx, false);
    let mut dw = Tensor::zeros(weights.shape());
    matmul(out, n, f, grad_out.data(), Op::T, input.data(), Op::N, dw.data_mut(), false);
    let mut db = vec![T::zero(); out];
    for row in grad_out.data().chunks(out) {
        for (b, g) in db.iter_mut().zip(row) {
            *b = *b + *g;
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        dw,
        Tensor::from_vec(&[out], db)?,
    ))
}

/// Output of [`softmax_cross_entropy`] for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLoss<T> {
    pub loss: T,
    pub posteriors: Vec<T>,
    pub grad_logits: Vec<T>,
}

/// Max-subtracted softmax followed by negative log-likelihood of `label`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<SoftmaxLoss<T>> {
    if label >= logits.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite logits".into()));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    let posteriors: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    let loss = sum.ln() - (logits[label] - max);
    let grad_logits = posteriors
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == label { p - T::one() } else { p })
        .collect();
    Ok(SoftmaxLoss {
        loss,
        posteriors,
        grad_logits,
    })
}

/// Row-wise softmax of a `(N, K)` logit tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::from_vec(logits.shape(), out).expect("same shape")
}
