//! Convolution engines: the bit-packed XOR/popcount path, a direct real-valued
//! reference, the im2col/GEMM path used during training, resampling helpers,
//! and operation counting.

pub mod bench;
mod im2col;

pub use im2col::{col2im, gemm, im2col};

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::bitpack::{words_for, BitTensor, ScaleFactors, WORD_BITS};
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Binary,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl ConvSpec {
    /// Spec with "same" padding (`k / 2`), so the output extent is
    /// `ceil(input / stride)`.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, mode: ConvMode) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride,
            padding: k / 2,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.k, 1 | 3) {
            return Err(Error::invalid(format!("kernel size {} not in {{1, 3}}", self.k)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::invalid(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.padding != self.k / 2 {
            return Err(Error::invalid(format!(
                "padding {} must be k/2 = {}",
                self.padding,
                self.k / 2
            )));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::invalid("zero channel count"));
        }
        Ok(())
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.k) / self.stride + 1,
            (w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Multiply-accumulate counts split into binary and real operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub bops: u64,
    pub flops: u64,
}

impl OpCount {
    pub fn flops(flops: u64) -> Self {
        Self { bops: 0, flops }
    }

    /// Combined cost: one 64-bit word carries 64 binary MACs.
    pub fn ops(&self) -> f64 {
        self.bops as f64 / 64.0 + self.flops as f64
    }
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            bops: self.bops + rhs.bops,
            flops: self.flops + rhs.flops,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        *self = *self + rhs;
    }
}

impl Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> Self {
        iter.fold(OpCount::default(), Add::add)
    }
}

pub fn count_ops(spec: &ConvSpec, out_h: usize, out_w: usize) -> OpCount {
    let macs = (spec.k * spec.k * spec.c_in * spec.c_out * out_h * out_w) as u64;
    match spec.mode {
        ConvMode::Binary => OpCount {
            bops: macs,
            // α scaling of every output value
            flops: (spec.c_out * out_h * out_w) as u64,
        },
        ConvMode::Real => OpCount::flops(macs),
    }
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!(
            "{what} must be (c, h, w), got {shape:?}"
        ))),
    }
}

/// Regroups a row-major `(c, h, w)` bit tensor into per-pixel channel words,
/// surrounded by `pad` rings of all-+1 pixels. Returns words laid out as
/// `[(y * pw + x) * wpp + word]`.
fn pixel_words(a: &BitTensor, c: usize, h: usize, w: usize, pad: usize) -> Vec<u64> {
    let wpp = words_for(c);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![u64::MAX; ph * pw * wpp];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let base = ((y + pad) * pw + x + pad) * wpp;
            for word in 0..wpp {
                let lo = word * WORD_BITS;
                let hi = (lo + WORD_BITS).min(c);
                // unused high bits stay 1, matching the weight padding
                let mut acc = u64::MAX;
                for ch in lo..hi {
                    if !a.bit(ch * plane + y * w + x) {
                        acc &= !(1u64 << (ch - lo));
                    }
                }
                out[base + word] = acc;
            }
        }
    }
    out
}

/// Regroups `(c_out, c_in, k, k)` weight bits into `[o][ky][kx][word]` order.
fn filter_words(wt: &BitTensor, c_out: usize, c_in: usize, k: usize) -> Vec<u64> {
    let wpp = words_for(c_in);
    let mut out = vec![u64::MAX; c_out * k * k * wpp];
    for o in 0..c_out {
        for ky in 0..k {
            for kx in 0..k {
                let base = ((o * k + ky) * k + kx) * wpp;
                for ch in 0..c_in {
                    let idx = ((o * c_in + ch) * k + ky) * k + kx;
                    if !wt.bit(idx) {
                        out[base + ch / WORD_BITS] &= !(1u64 << (ch % WORD_BITS));
                    }
                }
            }
        }
    }
    out
}

/// Binary convolution of one `(c_in, h, w)` activation map:
/// `out[o, y, x] = α_o · (n − 2·popcount(w_o XOR patch))`, `n = k·k·c_in`.
///
/// Padded positions are +1 activations. Pad bits inside partial words are +1
/// in both operands, so they XOR to zero and never reach the popcount.
pub fn binary_conv2d(
    a: &BitTensor,
    w: &BitTensor,
    alpha: &ScaleFactors,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    spec.validate()?;
    if spec.mode != ConvMode::Binary {
        return Err(Error::invalid("binary_conv2d requires a binary spec"));
    }
    let (c, h, wd) = dims3(a.shape(), "activations")?;
    if c != spec.c_in {
        return Err(Error::invalid(format!(
            "activations have {c} channels, spec expects {}",
            spec.c_in
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::invalid(format!(
            "weights have shape {:?}, spec expects {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if alpha.len() != spec.c_out {
        return Err(Error::invalid(format!(
            "{} scale factors for {} filters",
            alpha.len(),
            spec.c_out
        )));
    }
    let k = spec.k;
    let wpp = words_for(c);
    let pad = spec.padding;
    let pw = wd + 2 * pad;
    let acts = pixel_words(a, c, h, wd, pad);
    let filt = filter_words(w, spec.c_out, c, k);
    let (oh, ow) = spec.out_dims(h, wd);
    let n = (k * k * c) as i64;
    let stride = spec.stride;
    let row_words = k * wpp;

    let plane = |o: usize, dst: &mut [f64]| {
        let fw = &filt[o * k * k * wpp..(o + 1) * k * k * wpp];
        let scale = alpha.0[o];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut pop = 0u32;
                for ky in 0..k {
                    let start = ((oy * stride + ky) * pw + ox * stride) * wpp;
                    let patch = &acts[start..start + row_words];
                    let frow = &fw[ky * row_words..(ky + 1) * row_words];
                    for (p, f) in patch.iter().zip(frow) {
                        pop += (p ^ f).count_ones();
                    }
                }
                dst[oy * ow + ox] = scale * (n - 2 * pop as i64) as f64;
            }
        }
    };

    let mut out = vec![0.0; spec.c_out * oh * ow];
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(o, dst)| plane(o, dst));
    }
    #[cfg(not(feature = "parallel"))]
    for (o, dst) in out.chunks_mut(oh * ow).enumerate() {
        plane(o, dst);
    }
    Ok(FloatTensor::from_parts(vec![spec.c_out, oh, ow], out))
}

/// Direct nested-loop cross-correlation of one `(c_in, h, w)` map with zero
/// padding. This is the float reference the binary kernel is benchmarked
/// against.
pub fn real_conv2d(a: &FloatTensor, w: &FloatTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    spec.validate()?;
    if spec.mode != ConvMode::Real {
        return Err(Error::invalid("real_conv2d requires a real spec"));
    }
    let (c, h, wd) = dims3(a.shape(), "activations")?;
    if c != spec.c_in || w.shape() != spec.weight_shape() {
        return Err(Error::invalid(format!(
            "activations {:?} / weights {:?} inconsistent with spec {:?}",
            a.shape(),
            w.shape(),
            spec
        )));
    }
    let (oh, ow) = spec.out_dims(h, wd);
    let (k, s, p) = (spec.k, spec.stride as isize, spec.padding as isize);
    let (x, wt) = (a.data(), w.data());
    let mut out = vec![0.0; spec.c_out * oh * ow];
    for o in 0..spec.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wt[((o * c + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(FloatTensor::from_parts(vec![spec.c_out, oh, ow], out))
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!(
            "expected at least 2 spatial dims, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape.iter().product::<usize>() / (h * w).max(1), h, w))
}

fn check_factor(factor: usize) -> Result<()> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::invalid(format!("resampling factor {factor} not in {{2, 4, 8}}")));
    }
    Ok(())
}

/// Replicates every pixel `factor × factor` times over the last two axes.
pub fn upsample_nearest(x: &FloatTensor, factor: usize) -> Result<FloatTensor> {
    check_factor(factor)?;
    let (planes, h, w) = spatial(x.shape())?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(FloatTensor::from_parts(shape, out))
}

/// Sums `factor × factor` blocks over the last two axes; the adjoint of
/// [`upsample_nearest`].
pub fn sum_pool(x: &FloatTensor, factor: usize) -> Result<FloatTensor> {
    check_factor(factor)?;
    let (planes, h, w) = spatial(x.shape())?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} not divisible by pooling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / factor) * ow + xx / factor] += src[y * w + xx];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(FloatTensor::from_parts(shape, out))
}

/// Averages `factor × factor` blocks over the last two axes.
pub fn avg_pool(x: &FloatTensor, factor: usize) -> Result<FloatTensor> {
    Ok(sum_pool(x, factor)?.scale(1.0 / (factor * factor) as f64))
}
