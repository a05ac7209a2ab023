//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function has a plain-Rust twin (`*_impl`) so the logic can be
//! tested natively; the exports only translate errors into JS exceptions.

use bipose_core::bitpack::{compute_scale, sign_quantize, BitTensor, ScaleFactors};
use bipose_core::eval::{decode_heatmap, encode_heatmap, Heatmap, Keypoint};
use bipose_core::kernels::{binary_conv2d, real_conv2d, ConvMode, ConvSpec};
use bipose_core::losses::AWingParams;
use bipose_core::tensor::FloatTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// `[diff, loss, dloss/dŷ]` triples for ŷ = y + diff, diff spanning `[-span, span]`.
pub fn awing_curve_impl(y: f64, p: AWingParams, span: f64, points: usize) -> Result<Vec<f64>, String> {
    p.validate().map_err(|e| e.to_string())?;
    if points < 2 || !(span > 0.0) || !(0.0..=1.0).contains(&y) {
        return Err("need points >= 2, span > 0 and y in [0, 1]".into());
    }
    let mut out = Vec::with_capacity(points * 3);
    for i in 0..points {
        let d = -span + 2.0 * span * i as f64 / (points - 1) as f64;
        out.extend([d, p.pixel(y, y + d), p.pixel_grad(y, y + d)]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn awing_curve(
    y: f64,
    omega: f64,
    epsilon: f64,
    alpha: f64,
    theta: f64,
    span: f64,
    points: usize,
) -> Result<Vec<f64>, JsValue> {
    let p = AWingParams {
        omega,
        epsilon,
        alpha,
        theta,
    };
    awing_curve_impl(y, p, span, points).map_err(js)
}

/// Single-joint heatmap of size `h x w` cells, row-major.
pub fn encode_impl(x: f64, y: f64, h: usize, w: usize, stride: f64, sigma: f64) -> Vec<f64> {
    let kp = Keypoint { x, y, visible: true };
    encode_heatmap(&[kp], (h, w), stride, sigma).maps.data().to_vec()
}

#[wasm_bindgen]
pub fn encode(x: f64, y: f64, h: usize, w: usize, stride: f64, sigma: f64) -> Vec<f64> {
    encode_impl(x, y, h, w, stride, sigma)
}

/// `[x, y, score]` in input pixels, or an empty vector when nothing peaks above zero.
pub fn decode_impl(values: &[f64], h: usize, w: usize, stride: f64) -> Result<Vec<f64>, String> {
    let maps = FloatTensor::new(vec![1, h, w], values.to_vec()).map_err(|e| e.to_string())?;
    let hm = Heatmap::new(maps, stride, 2.0).map_err(|e| e.to_string())?;
    Ok(match decode_heatmap(&hm).pop().flatten() {
        Some(d) => vec![d.x, d.y, d.score],
        None => Vec::new(),
    })
}

#[wasm_bindgen]
pub fn decode(values: &[f64], h: usize, w: usize, stride: f64) -> Result<Vec<f64>, JsValue> {
    decode_impl(values, h, w, stride).map_err(js)
}

/// Random activations and weights for one binary layer, run through both the
/// bit-packed kernel and the float reference.
#[wasm_bindgen]
pub struct ConvDemo {
    spec: ConvSpec,
    real: ConvSpec,
    x: FloatTensor,
    w: FloatTensor,
    bits: BitTensor,
    wb: BitTensor,
    alpha: ScaleFactors,
}

impl ConvDemo {
    pub fn build(c_in: usize, c_out: usize, k: usize, size: usize, seed: u64) -> Result<ConvDemo, String> {
        let spec = ConvSpec::new(c_in, c_out, k, 1, ConvMode::Binary);
        spec.validate().map_err(|e| e.to_string())?;
        if size == 0 {
            return Err("size must be positive".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FloatTensor::from_fn(&[c_in, size, size], |_| rng.gen_range(-1.0..1.0));
        let w = FloatTensor::from_fn(&spec.weight_shape(), |_| rng.gen_range(-1.0..1.0));
        let alpha = compute_scale(&w, k, c_in).map_err(|e| e.to_string())?;
        let bits = sign_quantize(&x).map_err(|e| e.to_string())?;
        let wb = sign_quantize(&w).map_err(|e| e.to_string())?;
        Ok(ConvDemo {
            real: ConvSpec::new(c_in, c_out, k, 1, ConvMode::Real),
            spec,
            x,
            w,
            bits,
            wb,
            alpha,
        })
    }

    pub fn binary_output(&self) -> Result<FloatTensor, String> {
        binary_conv2d(&self.bits, &self.wb, &self.alpha, &self.spec).map_err(|e| e.to_string())
    }

    /// The float reference on the same ±1 data: sign tensors, +1 border,
    /// scaled by α afterwards.
    pub fn reference_output(&self) -> Result<FloatTensor, String> {
        let sign = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        let (c, h) = (self.spec.c_in, self.x.shape()[1]);
        let p = self.spec.padding;
        let b = h + 2 * p;
        let xs = self.x.data();
        let bordered = FloatTensor::from_fn(&[c, b, b], |i| {
            let (ch, r) = (i / (b * b), i % (b * b));
            let (yy, xx) = (r / b, r % b);
            if yy < p || xx < p || yy >= h + p || xx >= h + p {
                1.0
            } else {
                sign(xs[(ch * h + yy - p) * h + xx - p])
            }
        });
        let ws = self.w.map(sign);
        let full = real_conv2d(&bordered, &ws, &self.real).map_err(|e| e.to_string())?;
        let n = self.spec.c_out;
        Ok(FloatTensor::from_fn(&[n, h, h], |i| {
            let (o, r) = (i / (h * h), i % (h * h));
            let (yy, xx) = (r / h, r % h);
            self.alpha.0[o] * full.data()[(o * b + yy + p) * b + xx + p]
        }))
    }
}

#[wasm_bindgen]
impl ConvDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(c_in: usize, c_out: usize, k: usize, size: usize, seed: u64) -> Result<ConvDemo, JsValue> {
        Self::build(c_in, c_out, k, size, seed).map_err(js)
    }

    /// Runs the bit-packed kernel; returns the output sum.
    pub fn run_binary(&self) -> Result<f64, JsValue> {
        Ok(self.binary_output().map_err(js)?.data().iter().sum())
    }

    /// Runs the float convolution on the real-valued inputs; returns the output sum.
    pub fn run_float(&self) -> Result<f64, JsValue> {
        let y = real_conv2d(&self.x, &self.w, &self.real).map_err(js)?;
        Ok(y.data().iter().sum())
    }

    /// Largest absolute difference between the binary kernel and the float reference.
    pub fn max_abs_diff(&self) -> Result<f64, JsValue> {
        let a = self.binary_output().map_err(js)?;
        let b = self.reference_output().map_err(js)?;
        Ok(a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
    }

    /// Output channel `o` of the binary result, row-major.
    pub fn binary_channel(&self, o: usize) -> Result<Vec<f64>, JsValue> {
        let y = self.binary_output().map_err(js)?;
        let plane = y.shape()[1] * y.shape()[2];
        y.data().get(o * plane..(o + 1) * plane).map(<[f64]>::to_vec).ok_or_else(|| js("channel out of range"))
    }

    pub fn bops(&self) -> f64 {
        let s = self.x.shape()[1];
        (self.spec.c_out * s * s * self.spec.fan_in()) as f64
    }
}
