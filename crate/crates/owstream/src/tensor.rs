//! Minimal dense tensor type and the layer primitives (convolution,
//! max-pooling, dense, L2 normalization) with analytic backward passes.
//!
//! Everything is `f64`, row-major, single-threaded. Shapes are validated at
//! the API boundary; a non-finite output from any op is an error, never a
//! silently propagated NaN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below this is treated as a degenerate pre-normalization vector.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        check_finite(&self.data, context)
    }
}

pub fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

/// Valid (no padding) 2-D convolution.
///
/// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, K, K]`, `bias` has
/// one entry per output channel. Output spatial dim is
/// `floor((in - K) / stride) + 1` per axis.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &[f64],
    stride: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = expect_3d(input)?;
    let (c_out, kc_in, k) = expect_kernels(kernels)?;
    if kc_in != c_in {
        return Err(Error::Config(format!(
            "kernel expects {} input channels, input has {}",
            kc_in, c_in
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Config(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            c_out
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be >= 1".into()));
    }
    if h < k || w < k {
        return Err(Error::Config(format!(
            "input {}x{} smaller than kernel {}x{}",
            h, w, k, k
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    let kd = kernels.data();
    let id = input.data();
    let od = out.data_mut();
    for oc in 0..c_out {
        let kbase_oc = oc * c_in * k * k;
        let obase_oc = oc * oh * ow;
        for ic in 0..c_in {
            let kbase = kbase_oc + ic * k * k;
            let ibase = ic * h * w;
            for oy in 0..oh {
                let iy0 = oy * stride;
                for ox in 0..ow {
                    let ix0 = ox * stride;
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let irow = ibase + (iy0 + ky) * w + ix0;
                        let krow = kbase + ky * k;
                        for kx in 0..k {
                            acc += id[irow + kx] * kd[krow + kx];
                        }
                    }
                    od[obase_oc + oy * ow + ox] += acc;
                }
            }
        }
        for cell in od[obase_oc..obase_oc + oh * ow].iter_mut() {
            *cell += bias[oc];
        }
    }
    out.check_finite("conv2d_forward")?;
    Ok(out)
}

/// Gradients of a conv layer: (d_kernels, d_bias, d_input).
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (c_in, h, w) = expect_3d(input)?;
    let (c_out, _, k) = expect_kernels(kernels)?;
    let (doc, oh, ow) = expect_3d(d_out)?;
    if doc != c_out {
        return Err(Error::Shape("d_out channel count mismatch".into()));
    }
    let mut d_kernels = Tensor::zeros(kernels.shape());
    let mut d_bias = vec![0.0; c_out];
    let mut d_input = Tensor::zeros(input.shape());
    let kd = kernels.data();
    let id = input.data();
    let gd = d_out.data();
    let dkd = d_kernels.data_mut();
    let did = d_input.data_mut();
    for oc in 0..c_out {
        let obase_oc = oc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[obase_oc + oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                d_bias[oc] += g;
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                for ic in 0..c_in {
                    let kbase = (oc * c_in + ic) * k * k;
                    let ibase = ic * h * w;
                    for ky in 0..k {
                        let irow = ibase + (iy0 + ky) * w + ix0;
                        let krow = kbase + ky * k;
                        for kx in 0..k {
                            dkd[krow + kx] += g * id[irow + kx];
                            did[irow + kx] += g * kd[krow + kx];
                        }
                    }
                }
            }
        }
    }
    Ok((d_kernels, d_bias, d_input))
}

/// Max-pooling with recorded argmax positions (flat indices into the input)
/// for backward routing. Ties break to the lowest flat index. Trailing
/// remainder columns/rows that do not fill a window are dropped.
pub fn maxpool_forward(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = expect_3d(input)?;
    // NaN never wins a > comparison, so it must be rejected up front.
    input.check_finite("maxpool_forward input")?;
    if k == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be >= 1".into()));
    }
    if h < k || w < k {
        return Err(Error::Config(format!(
            "input {}x{} smaller than pool window {}",
            h, w, k
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0usize; c * oh * ow];
    let id = input.data();
    let od = out.data_mut();
    for ch in 0..c {
        let ibase = ch * h * w;
        let obase = ch * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let iy0 = oy * stride;
                let ix0 = ox * stride;
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = ibase + (iy0 + ky) * w + ix0 + kx;
                        if id[idx] > best {
                            best = id[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = best_idx;
            }
        }
    }
    out.check_finite("maxpool_forward")?;
    Ok((out, argmax))
}

/// Routes output gradients back to the recorded argmax positions.
pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], d_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != d_out.len() {
        return Err(Error::Shape("argmax map does not match d_out".into()));
    }
    let mut d_input = Tensor::zeros(input_shape);
    let did = d_input.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax) {
        did[idx] += g;
    }
    Ok(d_input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// `out = act(W x + b)` where `weights` is `[n_out, n_in]`.
pub fn dense_forward(
    input: &[f64],
    weights: &Tensor,
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    let (n_out, n_in) = expect_2d(weights)?;
    if input.len() != n_in {
        return Err(Error::Shape(format!(
            "dense input has {} features, weights expect {}",
            input.len(),
            n_in
        )));
    }
    if bias.len() != n_out {
        return Err(Error::Shape("dense bias length mismatch".into()));
    }
    let wd = weights.data();
    let mut out = Vec::with_capacity(n_out);
    for row in 0..n_out {
        let base = row * n_in;
        let mut acc = bias[row];
        for (wv, xv) in wd[base..base + n_in].iter().zip(input) {
            acc += wv * xv;
        }
        out.push(match activation {
            Activation::Relu => acc.max(0.0),
            Activation::Identity => acc,
        });
    }
    check_finite(&out, "dense_forward")?;
    Ok(out)
}

/// Gradients of a dense layer: (d_weights, d_bias, d_input).
///
/// `output` must be the post-activation values from the forward pass; the
/// ReLU mask is recovered from it (gradient 0 where output is 0).
pub fn dense_backward(
    input: &[f64],
    weights: &Tensor,
    output: &[f64],
    activation: Activation,
    d_out: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n_out, n_in) = expect_2d(weights)?;
    if d_out.len() != n_out || output.len() != n_out || input.len() != n_in {
        return Err(Error::Shape("dense_backward dimension mismatch".into()));
    }
    let mut d_weights = Tensor::zeros(weights.shape());
    let mut d_bias = vec![0.0; n_out];
    let mut d_input = vec![0.0; n_in];
    let wd = weights.data();
    let dwd = d_weights.data_mut();
    for row in 0..n_out {
        let g = match activation {
            Activation::Relu if output[row] <= 0.0 => 0.0,
            _ => d_out[row],
        };
        if g == 0.0 {
            continue;
        }
        d_bias[row] = g;
        let base = row * n_in;
        for i in 0..n_in {
            dwd[base + i] = g * input[i];
            d_input[i] += g * wd[base + i];
        }
    }
    Ok((d_weights, d_bias, d_input))
}

/// Projects a vector onto the unit sphere. A norm at or below [`EPS_NORM`]
/// is a degenerate embedding and an error.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "l2_normalize input")?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= EPS_NORM {
        return Err(Error::DegenerateEmbedding(norm));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Backward through `e = u / ||u||`: the Jacobian annihilates the radial
/// component, `du = (de - (de . e) e) / ||u||`.
pub fn l2_normalize_backward(pre_norm: &[f64], d_out: &[f64]) -> Result<Vec<f64>> {
    if pre_norm.len() != d_out.len() {
        return Err(Error::Shape("l2_normalize_backward length mismatch".into()));
    }
    let norm = pre_norm.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= EPS_NORM {
        return Err(Error::DegenerateEmbedding(norm));
    }
    let e: Vec<f64> = pre_norm.iter().map(|x| x / norm).collect();
    let radial: f64 = d_out.iter().zip(&e).map(|(g, ev)| g * ev).sum();
    Ok(d_out
        .iter()
        .zip(&e)
        .map(|(g, ev)| (g - radial * ev) / norm)
        .collect())
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn expect_3d(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Shape(format!("expected [C,H,W] tensor, got {:?}", s))),
    }
}

fn expect_2d(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected matrix, got {:?}", s))),
    }
}

fn expect_kernels(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [oc, ic, k1, k2] if k1 == k2 => Ok((*oc, *ic, *k1)),
        s => Err(Error::Shape(format!(
            "expected [C_out,C_in,K,K] kernels, got {:?}",
            s
        ))),
    }
}
