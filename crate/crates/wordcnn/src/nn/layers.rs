//! Layer primitives: valid 1-D convolution, ReLU, max-pooling, dropout,
//! dense, and softmax cross-entropy, each with an exact backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::{scalar, Scalar, Tensor};

/// Valid (unpadded) 1-D convolution over a `T x D` input with `F` filters of
/// width `k` spanning all `D` channels. Output is `(T-k+1) x F`.
///
/// The accumulation order is fixed — bias first, then filter offset `j`
/// outer, channel `d` inner — so results are bit-reproducible and can be
/// compared exactly against a reference loop.
pub fn conv1d_forward<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [t_len, dim] = two_d("conv1d input", input)?;
    if filters.shape().len() != 3 {
        return Err(Error::shape(
            "conv1d filters",
            format!("expected rank 3 (F x k x D), got {:?}", filters.shape()),
        ));
    }
    let num_filters = filters.shape()[0];
    let k = filters.shape()[1];
    if filters.shape()[2] != dim {
        return Err(Error::shape(
            "conv1d",
            format!("filter depth {} != input dim {dim}", filters.shape()[2]),
        ));
    }
    if bias.shape() != [num_filters] {
        return Err(Error::shape(
            "conv1d",
            format!("bias shape {:?} != [{num_filters}]", bias.shape()),
        ));
    }
    if t_len < k {
        return Err(Error::shape(
            "conv1d",
            format!("input length {t_len} shorter than kernel {k}"),
        ));
    }
    let out_len = t_len - k + 1;
    let mut out = Tensor::zeros(&[out_len, num_filters]);
    let in_data = input.data();
    let f_data = filters.data();
    let b_data = bias.data();
    for t in 0..out_len {
        for f in 0..num_filters {
            let mut acc = b_data[f];
            for j in 0..k {
                let in_row = (t + j) * dim;
                let f_row = (f * k + j) * dim;
                for d in 0..dim {
                    acc = acc + in_data[in_row + d] * f_data[f_row + d];
                }
            }
            *out.at2_mut(t, f) = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d_forward`] with respect to input, filters, and bias.
pub fn conv1d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [t_len, dim] = two_d("conv1d input", input)?;
    let num_filters = filters.shape()[0];
    let k = filters.shape()[1];
    let out_len = t_len - k + 1;
    if grad_out.shape() != [out_len, num_filters] {
        return Err(Error::shape(
            "conv1d backward",
            format!(
                "grad shape {:?} != [{out_len}, {num_filters}]",
                grad_out.shape()
            ),
        ));
    }
    let mut grad_input = Tensor::zeros(&[t_len, dim]);
    let mut grad_filters = Tensor::zeros(filters.shape());
    let mut grad_bias = Tensor::zeros(&[num_filters]);
    let g = grad_out.data();
    let in_data = input.data();
    let f_data = filters.data();
    for t in 0..out_len {
        for f in 0..num_filters {
            let go = g[t * num_filters + f];
            grad_bias.data_mut()[f] = grad_bias.data()[f] + go;
            for j in 0..k {
                let in_row = (t + j) * dim;
                let f_row = (f * k + j) * dim;
                for d in 0..dim {
                    grad_filters.data_mut()[f_row + d] =
                        grad_filters.data()[f_row + d] + go * in_data[in_row + d];
                    grad_input.data_mut()[in_row + d] =
                        grad_input.data()[in_row + d] + go * f_data[f_row + d];
                }
            }
        }
    }
    Ok((grad_input, grad_filters, grad_bias))
}

/// Elementwise `max(x, 0)`; returns the output and the positive mask for backward.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mut out = x.clone();
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    (out, mask)
}

/// Pass gradient through where the forward input was strictly positive.
/// The gradient at exactly zero is defined as zero.
pub fn relu_backward<T: Scalar>(grad: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    assert_eq!(grad.len(), mask.len(), "relu mask length mismatch");
    let mut out = grad.clone();
    for (v, &keep) in out.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = T::zero();
        }
    }
    out
}

/// Non-overlapping max-pooling down the rows of an `L x F` input with window
/// and stride `pool`; a trailing remainder shorter than `pool` is dropped.
/// Returns the pooled tensor and, per output element, the input row index of
/// its maximum (first row on ties).
pub fn maxpool1d_forward<T: Scalar>(
    input: &Tensor<T>,
    pool: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    assert!(pool >= 1, "pool must be >= 1");
    let [rows, cols] = two_d("maxpool input", input)?;
    if rows < pool {
        return Err(Error::shape(
            "maxpool1d",
            format!("input length {rows} shorter than pool {pool}"),
        ));
    }
    let out_rows = rows / pool;
    let mut out = Tensor::zeros(&[out_rows, cols]);
    let mut argmax = vec![0usize; out_rows * cols];
    for i in 0..out_rows {
        for f in 0..cols {
            let mut best_row = i * pool;
            let mut best = input.at2(best_row, f);
            for r in i * pool + 1..(i + 1) * pool {
                let v = input.at2(r, f);
                if v > best {
                    best = v;
                    best_row = r;
                }
            }
            *out.at2_mut(i, f) = best;
            argmax[i * cols + f] = best_row;
        }
    }
    Ok((out, argmax))
}

/// Route each output gradient solely to its argmax input position.
pub fn maxpool1d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    in_rows: usize,
) -> Tensor<T> {
    let cols = grad_out.cols();
    let mut grad_input = Tensor::zeros(&[in_rows, cols]);
    for i in 0..grad_out.rows() {
        for f in 0..cols {
            let row = argmax[i * cols + f];
            *grad_input.at2_mut(row, f) =
                grad_input.at2(row, f) + grad_out.at2(i, f);
        }
    }
    grad_input
}

/// Per-feature maximum over all positions of an `L x F` input; the window is
/// the whole sequence. Returns the `F` vector and per-feature argmax rows.
pub fn global_maxpool_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [rows, cols] = two_d("global maxpool input", input)?;
    if rows == 0 {
        return Err(Error::shape("global_maxpool", "empty input"));
    }
    let mut out = vec![T::zero(); cols];
    let mut argmax = vec![0usize; cols];
    for f in 0..cols {
        let mut best = input.at2(0, f);
        let mut best_row = 0usize;
        for r in 1..rows {
            let v = input.at2(r, f);
            if v > best {
                best = v;
                best_row = r;
            }
        }
        out[f] = best;
        argmax[f] = best_row;
    }
    Ok((Tensor::vector(out), argmax))
}

pub fn global_maxpool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    in_rows: usize,
) -> Tensor<T> {
    let cols = grad_out.len();
    let mut grad_input = Tensor::zeros(&[in_rows, cols]);
    for f in 0..cols {
        *grad_input.at2_mut(argmax[f], f) = grad_out.data()[f];
    }
    grad_input
}

/// Inverted dropout. In train mode (an RNG is supplied) each unit is kept
/// with probability `1-p` and scaled by `1/(1-p)`, so eval mode is a pure
/// identity. Returns the output and the scaled mask when one was applied.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
    }
    let rng = match rng {
        Some(rng) if p > 0.0 => rng,
        _ => return Ok((x.clone(), None)),
    };
    let keep_scale: T = scalar(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((out, Some(mask)))
}

/// Multiply by the same scaled mask the forward applied (identity when none).
pub fn dropout_backward<T: Scalar>(grad: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    match mask {
        None => grad.clone(),
        Some(mask) => {
            let mut out = grad.clone();
            for (v, &m) in out.data_mut().iter_mut().zip(mask) {
                *v = *v * m;
            }
            out
        }
    }
}

/// Affine map `y = xW + b` for a length-`F` vector, `F x C` weights.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [rows, cols] = two_d("dense weights", weights)?;
    if x.shape() != [rows] {
        return Err(Error::shape(
            "dense",
            format!("input shape {:?} != [{rows}]", x.shape()),
        ));
    }
    if bias.shape() != [cols] {
        return Err(Error::shape(
            "dense",
            format!("bias shape {:?} != [{cols}]", bias.shape()),
        ));
    }
    let mut out = bias.data().to_vec();
    for i in 0..rows {
        let xi = x.data()[i];
        let w_row = i * cols;
        for (c, o) in out.iter_mut().enumerate() {
            *o = *o + xi * weights.data()[w_row + c];
        }
    }
    Ok(Tensor::vector(out))
}

/// Gradients of [`dense_forward`]: returns (grad_input, grad_weights, grad_bias).
pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [rows, cols] = two_d("dense weights", weights)?;
    if grad_out.shape() != [cols] {
        return Err(Error::shape(
            "dense backward",
            format!("grad shape {:?} != [{cols}]", grad_out.shape()),
        ));
    }
    let mut grad_x = Tensor::zeros(&[rows]);
    let mut grad_w = Tensor::zeros(&[rows, cols]);
    let grad_b = grad_out.clone();
    for i in 0..rows {
        let xi = x.data()[i];
        let w_row = i * cols;
        let mut acc = T::zero();
        for c in 0..cols {
            let g = grad_out.data()[c];
            grad_w.data_mut()[w_row + c] = xi * g;
            acc = acc + weights.data()[w_row + c] * g;
        }
        grad_x.data_mut()[i] = acc;
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Softmax with cross-entropy loss and its logit gradient.
#[derive(Debug, Clone)]
pub struct SoftmaxLoss<T: Scalar> {
    pub loss: T,
    pub probs: Vec<T>,
    pub grad_logits: Vec<T>,
}

/// Numerically stable softmax cross-entropy: probabilities via max
/// subtraction, loss via log-sum-exp, gradient `probs - onehot(label)`.
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> Result<SoftmaxLoss<T>> {
    let classes = logits.len();
    if classes < 2 {
        return Err(Error::Input(format!(
            "softmax needs at least 2 classes, got {classes}"
        )));
    }
    if label >= classes {
        return Err(Error::Input(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let max = logits
        .iter()
        .copied()
        .fold(logits[0], |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    let probs: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    let loss = sum.ln() + max - logits[label];
    let mut grad_logits = probs.clone();
    grad_logits[label] = grad_logits[label] - T::one();
    Ok(SoftmaxLoss {
        loss,
        probs,
        grad_logits,
    })
}

fn two_d<T: Scalar>(context: &str, t: &Tensor<T>) -> Result<[usize; 2]> {
    if t.shape().len() != 2 {
        return Err(Error::shape(
            context,
            format!("expected rank 2, got shape {:?}", t.shape()),
        ));
    }
    Ok([t.shape()[0], t.shape()[1]])
}
