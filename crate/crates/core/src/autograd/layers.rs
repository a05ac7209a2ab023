use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    approx_sign, approx_sign_grad, batchnorm_backward, batchnorm_forward, batchnorm_inference,
    fully_connected, fully_connected_backward, missing_cache, prelu_backward, prelu_forward, sign,
    BnCache, Layer, Param, ParamKind, Pass, BN_EPS, BN_MOMENTUM,
};
use crate::bitpack::{pack, sign_quantize};
use crate::error::{Error, Result};
use crate::kernels::{binary_conv2d, col2im, count_ops, gemm, im2col, ConvMode, ConvSpec, OpCount};
use crate::tensor::FloatTensor;

struct ConvCache {
    input: FloatTensor,
    cols: Vec<Vec<f64>>,
    weights: Vec<f64>,
    alpha: Vec<f64>,
}

/// 2-d convolution without bias, real or binary.
///
/// In binary mode both the input and the latent weights are binarized and the
/// output of filter `o` is scaled by `α_o`. Padded taps read +1.
pub struct Conv2d {
    spec: ConvSpec,
    pub weight: Param,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let value = FloatTensor::from_fn(&spec.weight_shape(), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        let kind = match spec.mode {
            ConvMode::Binary => ParamKind::BinaryWeight,
            ConvMode::Real => ParamKind::Real,
        };
        Ok(Self {
            spec,
            weight: Param::new(format!("{name}.weight"), kind, value),
            cache: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    fn quantize(&self, v: f64, pass: Pass) -> f64 {
        if pass.smooth_sign {
            approx_sign(v)
        } else {
            sign(v)
        }
    }

    fn forward_packed(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let (n, _, h, w) = x.dims4()?;
        let wb = pack(&self.weight.value);
        let alpha = self.weight.scale_factors()?;
        let (oh, ow) = self.spec.out_dims(h, w);
        let mut out = Vec::with_capacity(n * self.spec.c_out * oh * ow);
        for s in 0..n {
            let xs = FloatTensor::from_parts(vec![self.spec.c_in, h, w], x.sample(s).to_vec());
            let a = sign_quantize(&xs)?;
            out.extend(binary_conv2d(&a, &wb, &alpha, &self.spec)?.into_data());
        }
        Ok(FloatTensor::from_parts(vec![n, self.spec.c_out, oh, ow], out))
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.spec.c_in {
            return Err(Error::invalid(format!(
                "{}: expected {} input channels, got {c}",
                self.weight.name, self.spec.c_in
            )));
        }
        let binary = self.spec.mode == ConvMode::Binary;
        if binary && !pass.train && !pass.smooth_sign {
            self.cache = None;
            return self.forward_packed(x);
        }
        let (oh, ow) = self.spec.out_dims(h, w);
        let (k, s, p) = (self.spec.k, self.spec.stride, self.spec.padding);
        let c_out = self.spec.c_out;
        let kdim = self.spec.fan_in();
        let l = oh * ow;
        let (weights, alpha, pad_value) = if binary {
            let wq = self.weight.value.data().iter().map(|&v| self.quantize(v, pass)).collect();
            (wq, self.weight.scale_factors()?.0, 1.0)
        } else {
            (self.weight.value.data().to_vec(), Vec::new(), 0.0)
        };
        let mut out = vec![0.0; n * c_out * l];
        let mut cols_all = Vec::with_capacity(if pass.train { n } else { 0 });
        for si in 0..n {
            let xs = x.sample(si);
            let cols = if binary {
                let q: Vec<f64> = xs.iter().map(|&v| self.quantize(v, pass)).collect();
                im2col(&q, c, h, w, k, s, p, pad_value)
            } else {
                im2col(xs, c, h, w, k, s, p, pad_value)
            };
            let dst = &mut out[si * c_out * l..(si + 1) * c_out * l];
            gemm(c_out, kdim, l, &weights, false, &cols, false, 0.0, dst);
            if binary {
                for (row, a) in dst.chunks_mut(l).zip(&alpha) {
                    row.iter_mut().for_each(|v| *v *= a);
                }
            }
            if pass.train {
                cols_all.push(cols);
            }
        }
        self.cache = pass.train.then(|| ConvCache {
            input: x.clone(),
            cols: cols_all,
            weights,
            alpha,
        });
        Ok(FloatTensor::from_parts(vec![n, c_out, oh, ow], out))
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| missing_cache(&self.weight.name))?;
        let (n, c, h, w) = cache.input.dims4()?;
        let (oh, ow) = self.spec.out_dims(h, w);
        let c_out = self.spec.c_out;
        if grad.shape() != [n, c_out, oh, ow] {
            return Err(Error::invalid(format!(
                "{}: gradient shape {:?} does not match output",
                self.weight.name,
                grad.shape()
            )));
        }
        let binary = self.spec.mode == ConvMode::Binary;
        let (k, s, p) = (self.spec.k, self.spec.stride, self.spec.padding);
        let kdim = self.spec.fan_in();
        let l = oh * ow;
        let mut dw = vec![0.0; c_out * kdim];
        let mut dx = vec![0.0; n * c * h * w];
        let mut dcols = vec![0.0; kdim * l];
        for si in 0..n {
            let g = grad.sample(si);
            let scaled;
            let g = if binary {
                scaled = g
                    .chunks(l)
                    .zip(&cache.alpha)
                    .flat_map(|(row, a)| row.iter().map(move |v| v * a))
                    .collect::<Vec<_>>();
                &scaled[..]
            } else {
                g
            };
            gemm(c_out, l, kdim, g, false, &cache.cols[si], true, 1.0, &mut dw);
            gemm(kdim, c_out, l, &cache.weights, true, g, false, 0.0, &mut dcols);
            col2im(&dcols, &mut dx[si * c * h * w..(si + 1) * c * h * w], c, h, w, k, s, p);
        }
        if binary {
            for (d, &v) in dw.iter_mut().zip(self.weight.value.data()) {
                *d *= approx_sign_grad(v);
            }
            for (d, &v) in dx.iter_mut().zip(cache.input.data()) {
                *d *= approx_sign_grad(v);
            }
        }
        for (acc, d) in self.weight.grad.data_mut().iter_mut().zip(&dw) {
            *acc += d;
        }
        Ok(FloatTensor::from_parts(vec![n, c, h, w], dx))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let (oh, ow) = self.spec.out_dims(h, w);
        (count_ops(&self.spec, oh, ow), oh, ow)
    }
}

/// Batch normalization over `(n, c, h, w)` with running statistics.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self::with_gamma(name, channels, 1.0)
    }

    pub fn with_gamma(name: &str, channels: usize, gamma: f64) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                ParamKind::Real,
                FloatTensor::full(&[channels], gamma),
            ),
            beta: Param::new(format!("{name}.beta"), ParamKind::Real, FloatTensor::zeros(&[channels])),
            running_mean: Param::new(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                FloatTensor::zeros(&[channels]),
            ),
            running_var: Param::new(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                FloatTensor::full(&[channels], 1.0),
            ),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        if !pass.train {
            self.cache = None;
            return batchnorm_inference(
                x,
                self.gamma.value.data(),
                self.beta.value.data(),
                self.running_mean.value.data(),
                self.running_var.value.data(),
                BN_EPS,
            );
        }
        let (n, _, h, w) = x.dims4()?;
        let (y, cache) =
            batchnorm_forward(x, self.gamma.value.data(), self.beta.value.data(), BN_EPS)?;
        let m = (n * h * w) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for (r, b) in self.running_mean.value.data_mut().iter_mut().zip(&cache.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.running_var.value.data_mut().iter_mut().zip(&cache.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| missing_cache(&self.gamma.name))?;
        let (dx, dg, db) = batchnorm_backward(&cache, self.gamma.value.data(), grad)?;
        for (a, d) in self.gamma.grad.data_mut().iter_mut().zip(&dg) {
            *a += d;
        }
        for (a, d) in self.beta.grad.data_mut().iter_mut().zip(&db) {
            *a += d;
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// PReLU with one learnable slope per channel.
pub struct PRelu {
    pub slope: Param,
    cache: Option<FloatTensor>,
}

impl PRelu {
    pub fn new(name: &str, channels: usize, init: f64) -> Self {
        Self {
            slope: Param::new(
                format!("{name}.slope"),
                ParamKind::Real,
                FloatTensor::full(&[channels], init),
            ),
            cache: None,
        }
    }
}

impl Layer for PRelu {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let y = prelu_forward(x, self.slope.value.data())?;
        self.cache = pass.train.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| missing_cache(&self.slope.name))?;
        let (dx, ds) = prelu_backward(&x, self.slope.value.data(), grad)?;
        for (a, d) in self.slope.grad.data_mut().iter_mut().zip(&ds) {
            *a += d;
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.slope]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.slope]
    }
}

/// Fully connected layer on `(n, in)` inputs.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<FloatTensor>,
}

impl Linear {
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / fin as f64).sqrt();
        let w = FloatTensor::from_fn(&[fout, fin], |_| std * rng.sample::<f64, _>(StandardNormal));
        Self {
            weight: Param::new(format!("{name}.weight"), ParamKind::Real, w),
            bias: Param::new(format!("{name}.bias"), ParamKind::Real, FloatTensor::zeros(&[fout])),
            cache: None,
        }
    }

    pub fn fan(&self) -> (usize, usize) {
        (self.weight.value.shape()[1], self.weight.value.shape()[0])
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let y = fully_connected(x, &self.weight.value, self.bias.value.data())?;
        self.cache = pass.train.then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| missing_cache(&self.weight.name))?;
        let (dx, dw, db) = fully_connected_backward(&x, &self.weight.value, grad)?;
        self.weight.grad.add_assign(&dw)?;
        for (a, d) in self.bias.grad.data_mut().iter_mut().zip(&db) {
            *a += d;
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let (fin, fout) = self.fan();
        (OpCount::flops((fin * fout) as u64), h, w)
    }
}
