//! Bit-packed ±1 tensors, the sign quantizer and per-filter scaling factors.
//!
//! Encoding: bit 1 is +1, bit 0 is -1. Bits are laid out in row-major order,
//! least significant bit first within each `u64` word. Unused bits in the last
//! word are set to 1 (the +1 encoding).

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const WORD_BITS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
    pad_bits: usize,
}

/// Number of words needed to hold `n` bits.
pub fn words_for(n: usize) -> usize {
    n.div_ceil(WORD_BITS)
}

/// Mask with the low `n` bits set (`n` in 1..=64).
#[inline]
pub(crate) fn low_mask(n: usize) -> u64 {
    if n >= WORD_BITS {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

impl BitTensor {
    /// Wraps raw words, validating word count and the pad-bit convention.
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        let expected = words_for(n);
        if words.len() != expected {
            return Err(Error::Corruption(format!(
                "{n} elements need {expected} words, found {}",
                words.len()
            )));
        }
        let pad_bits = expected * WORD_BITS - n;
        if pad_bits > 0 {
            let used = WORD_BITS - pad_bits;
            let pad_mask = !low_mask(used);
            if words[expected - 1] & pad_mask != pad_mask {
                return Err(Error::Corruption("pad bits must encode +1".into()));
            }
        }
        Ok(Self {
            shape,
            words,
            pad_bits,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn pad_bits(&self) -> usize {
        self.pad_bits
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `i` as a bool (+1 ⇔ true).
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Number of +1 elements, excluding pad bits.
    pub fn count_ones(&self) -> usize {
        let total: usize = self.words.iter().map(|w| w.count_ones() as usize).sum();
        total - self.pad_bits
    }
}

fn pack_bits(shape: Vec<usize>, values: &[f64]) -> BitTensor {
    let n = values.len();
    let mut words = vec![0u64; words_for(n)];
    for (chunk, word) in values.chunks(WORD_BITS).zip(words.iter_mut()) {
        let mut acc = 0u64;
        for (j, &v) in chunk.iter().enumerate() {
            acc |= ((v >= 0.0) as u64) << j;
        }
        if chunk.len() < WORD_BITS {
            acc |= !low_mask(chunk.len());
        }
        *word = acc;
    }
    let pad_bits = words.len() * WORD_BITS - n;
    BitTensor {
        shape,
        words,
        pad_bits,
    }
}

/// Binarizes with `x >= 0 → +1`, `x < 0 → -1`.
pub fn sign_quantize(x: &FloatTensor) -> Result<BitTensor> {
    x.check_finite()?;
    Ok(pack_bits(x.shape().to_vec(), x.data()))
}

/// Packs a tensor whose values are already ±1. Any other value is mapped by
/// its sign, matching [`sign_quantize`].
pub fn pack(x: &FloatTensor) -> BitTensor {
    pack_bits(x.shape().to_vec(), x.data())
}

pub fn unpack(b: &BitTensor) -> Result<FloatTensor> {
    let n = b.len();
    if words_for(n) != b.words.len() || b.words.len() * WORD_BITS - n != b.pad_bits {
        return Err(Error::Corruption(format!(
            "bit tensor of shape {:?} has {} words and {} pad bits",
            b.shape,
            b.words.len(),
            b.pad_bits
        )));
    }
    let data = (0..n)
        .map(|i| if b.bit(i) { 1.0 } else { -1.0 })
        .collect();
    Ok(FloatTensor::from_parts(b.shape.clone(), data))
}

/// Per-output-filter scaling factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFactors(pub Vec<f64>);

impl ScaleFactors {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `α_o = ‖W_o‖₁ / (k·k·c_in)` for every output filter of a
/// `(c_out, c_in, k, k)` weight tensor.
pub fn compute_scale(w: &FloatTensor, k: usize, c_in: usize) -> Result<ScaleFactors> {
    let per_filter = k * k * c_in;
    if per_filter == 0 {
        return Err(Error::invalid("zero-sized filter"));
    }
    match w.shape() {
        [_, ci, kh, kw] if *ci == c_in && *kh == k && *kw == k => {}
        s => {
            return Err(Error::invalid(format!(
                "weight shape {s:?} does not match (c_out, {c_in}, {k}, {k})"
            )))
        }
    }
    Ok(ScaleFactors(
        w.data()
            .chunks(per_filter)
            .map(|f| f.iter().map(|v| v.abs()).sum::<f64>() / per_filter as f64)
            .collect(),
    ))
}
