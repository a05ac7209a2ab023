//! Reverse-mode differentiation for the layer vocabulary of the network.
//!
//! Layers cache what they need during a training forward pass and consume the
//! cache in `backward`, accumulating parameter gradients and returning the
//! gradient of their input. A second `backward` without a fresh forward is an
//! error; higher-order gradients are not supported.

mod layers;

pub use layers::{BatchNorm2d, Conv2d, Linear, PRelu};

use crate::bitpack::{compute_scale, ScaleFactors};
use crate::error::{Error, Result};
use crate::kernels::OpCount;
use crate::tensor::FloatTensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Latent binary weights are clamped to this magnitude after every update.
pub const LATENT_CLAMP: f64 = 1.5;

/// How a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics and gradient caches when set; running statistics and
    /// the bit-packed kernel otherwise.
    pub train: bool,
    /// Replace the sign quantizer by its smooth ApproxSign primitive. Only
    /// meaningful for finite-difference checking, where it makes the forward
    /// function match the surrogate gradient exactly.
    pub smooth_sign: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        train: true,
        smooth_sign: false,
    };
    pub const EVAL: Pass = Pass {
        train: false,
        smooth_sign: false,
    };
    pub const SURROGATE: Pass = Pass {
        train: true,
        smooth_sign: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Real-valued trainable parameter.
    Real,
    /// Latent weight of a binary convolution; binarized on every forward pass.
    BinaryWeight,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: FloatTensor,
    pub grad: FloatTensor,
    frozen_scale: Option<ScaleFactors>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: FloatTensor) -> Self {
        let grad = FloatTensor::zeros(value.shape());
        Self {
            name: name.into(),
            kind,
            value,
            grad,
            frozen_scale: None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Scaling factors of a binary weight: the frozen table if one was set
    /// (e.g. after loading a packed model), otherwise recomputed from the
    /// latent weights.
    pub fn scale_factors(&self) -> Result<ScaleFactors> {
        if let Some(s) = &self.frozen_scale {
            return Ok(s.clone());
        }
        match self.value.shape() {
            [_, c_in, k, _] => compute_scale(&self.value, *k, *c_in),
            s => Err(Error::invalid(format!("{}: not a conv weight {s:?}", self.name))),
        }
    }

    /// Pins the scaling factors to their current value.
    pub fn freeze_scale(&mut self) -> Result<()> {
        self.frozen_scale = Some(self.scale_factors()?);
        Ok(())
    }

    pub(crate) fn set_frozen_scale(&mut self, s: Option<ScaleFactors>) {
        self.frozen_scale = s;
    }

    pub fn frozen_scale(&self) -> Option<&ScaleFactors> {
        self.frozen_scale.as_ref()
    }

    /// Replaces the value after an optimizer step. Any frozen scale is
    /// dropped because it no longer describes the weights.
    pub fn set_value(&mut self, v: FloatTensor) {
        self.value = v;
        self.frozen_scale = None;
    }

    pub fn value_mut(&mut self) -> &mut FloatTensor {
        self.frozen_scale = None;
        &mut self.value
    }
}

/// A differentiable layer with a single input and output.
pub trait Layer {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor>;
    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor>;
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    /// Operation count for an `h × w` input; returns the output extent too.
    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        (OpCount::default(), h, w)
    }
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::MissingGradient(format!(
        "{layer}: backward called without a preceding training forward \
         (or called twice; double backward is not supported)"
    ))
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Piecewise-quadratic ApproxSign: `2x + x²` on `[-1, 0)`, `2x − x²` on
/// `[0, 1)`, saturating at ±1.
#[inline]
pub fn approx_sign(x: f64) -> f64 {
    if x < -1.0 {
        -1.0
    } else if x < 0.0 {
        2.0 * x + x * x
    } else if x < 1.0 {
        2.0 * x - x * x
    } else {
        1.0
    }
}

/// Derivative of [`approx_sign`]; the surrogate gradient of `sign`.
#[inline]
pub fn approx_sign_grad(x: f64) -> f64 {
    if (-1.0..0.0).contains(&x) {
        2.0 + 2.0 * x
    } else if (0.0..=1.0).contains(&x) {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

pub fn sign_ste_forward(x: &FloatTensor) -> Result<FloatTensor> {
    x.check_finite()?;
    Ok(x.map(sign))
}

pub fn sign_ste_backward(x: &FloatTensor, upstream: &FloatTensor) -> Result<FloatTensor> {
    x.zip_map(upstream, |xi, g| g * approx_sign_grad(xi))
}

#[derive(Clone, Debug)]
pub struct BnCache {
    pub x_hat: FloatTensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch normalization over `(n, h, w)` per channel.
pub fn batchnorm_forward(
    x: &FloatTensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(FloatTensor, BnCache)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::invalid(format!(
            "batch norm over {c} channels got {} / {} affine params",
            gamma.len(),
            beta.len()
        )));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            mean[ch] += xd[base..base + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            var[ch] += xd[base..base + plane]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        FloatTensor::from_parts(shape.clone(), y),
        BnCache {
            x_hat: FloatTensor::from_parts(shape, x_hat),
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &[f64],
    dy: &FloatTensor,
) -> Result<(FloatTensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = dy.dims4()?;
    cache.x_hat.expect_same_shape(dy)?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let (xh, g) = (cache.x_hat.data(), dy.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for i in base..base + plane {
                dx[i] = k * (m * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok((FloatTensor::from_parts(dy.shape().to_vec(), dx), dgamma, dbeta))
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batchnorm_inference(
    x: &FloatTensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<FloatTensor> {
    let (_, c, h, w) = x.dims4()?;
    if [gamma.len(), beta.len(), mean.len(), var.len()] != [c; 4] {
        return Err(Error::invalid("batch-norm statistics do not match channels"));
    }
    let plane = h * w;
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *v = gamma[ch] * (*v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
    }
    Ok(y)
}

fn channel_of(i: usize, shape: &[usize]) -> usize {
    let plane: usize = shape[2..].iter().product();
    (i / plane) % shape[1]
}

/// Per-channel PReLU on an `(n, c, ...)` tensor.
pub fn prelu_forward(x: &FloatTensor, slopes: &[f64]) -> Result<FloatTensor> {
    if x.shape().len() < 2 || x.shape()[1] != slopes.len() {
        return Err(Error::invalid(format!(
            "PReLU with {} slopes applied to {:?}",
            slopes.len(),
            x.shape()
        )));
    }
    let shape = x.shape();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v >= 0.0 { v } else { slopes[channel_of(i, shape)] * v })
        .collect();
    Ok(FloatTensor::from_parts(shape.to_vec(), data))
}

/// Returns `(dx, dslopes)`.
pub fn prelu_backward(
    x: &FloatTensor,
    slopes: &[f64],
    dy: &FloatTensor,
) -> Result<(FloatTensor, Vec<f64>)> {
    x.expect_same_shape(dy)?;
    let shape = x.shape();
    let mut dslope = vec![0.0; slopes.len()];
    let mut dx = vec![0.0; x.len()];
    for (i, (&v, &g)) in x.data().iter().zip(dy.data()).enumerate() {
        if v >= 0.0 {
            dx[i] = g;
        } else {
            let ch = channel_of(i, shape);
            dx[i] = slopes[ch] * g;
            dslope[ch] += v * g;
        }
    }
    Ok((FloatTensor::from_parts(shape.to_vec(), dx), dslope))
}

pub fn sigmoid(x: &FloatTensor) -> FloatTensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward of sigmoid given its output `s`.
pub fn sigmoid_backward(s: &FloatTensor, dy: &FloatTensor) -> Result<FloatTensor> {
    s.zip_map(dy, |s, g| g * s * (1.0 - s))
}

pub fn relu(x: &FloatTensor) -> FloatTensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &FloatTensor, dy: &FloatTensor) -> Result<FloatTensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// `(n, c, h, w) → (n, c)` spatial mean.
pub fn global_avg_pool(x: &FloatTensor) -> Result<FloatTensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(FloatTensor::from_parts(vec![n, c], data))
}

pub fn global_avg_pool_backward(dy: &FloatTensor, h: usize, w: usize) -> Result<FloatTensor> {
    let [n, c] = dy.shape()[..] else {
        return Err(Error::invalid("pooled gradient must be (n, c)"));
    };
    let plane = h * w;
    let mut dx = Vec::with_capacity(n * c * plane);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    Ok(FloatTensor::from_parts(vec![n, c, h, w], dx))
}

/// `y = x·Wᵀ + b` for `x: (n, in)`, `W: (out, in)`.
pub fn fully_connected(x: &FloatTensor, w: &FloatTensor, b: &[f64]) -> Result<FloatTensor> {
    let ([n, fin], [fout, win]) = (x.shape(), w.shape()) else {
        return Err(Error::invalid("fully connected expects (n, in) and (out, in)"));
    };
    let (n, fin, fout) = (*n, *fin, *fout);
    if *win != fin || b.len() != fout {
        return Err(Error::invalid(format!(
            "fully connected: input {:?}, weight {:?}, bias {}",
            x.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut y = vec![0.0; n * fout];
    for s in 0..n {
        y[s * fout..(s + 1) * fout].copy_from_slice(b);
    }
    crate::kernels::gemm(n, fin, fout, x.data(), false, w.data(), true, 1.0, &mut y);
    Ok(FloatTensor::from_parts(vec![n, fout], y))
}

/// Returns `(dx, dW, db)`.
pub fn fully_connected_backward(
    x: &FloatTensor,
    w: &FloatTensor,
    dy: &FloatTensor,
) -> Result<(FloatTensor, FloatTensor, Vec<f64>)> {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    if dy.shape() != [n, fout] {
        return Err(Error::invalid("fully connected gradient shape mismatch"));
    }
    let mut dx = vec![0.0; n * fin];
    crate::kernels::gemm(n, fout, fin, dy.data(), false, w.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; fout * fin];
    crate::kernels::gemm(fout, n, fin, dy.data(), true, x.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0; fout];
    for row in dy.data().chunks(fout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        FloatTensor::from_parts(vec![n, fin], dx),
        FloatTensor::from_parts(vec![fout, fin], dw),
        db,
    ))
}
