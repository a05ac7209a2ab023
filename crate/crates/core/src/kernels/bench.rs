//! Micro-benchmark of the bit-packed convolution against the direct float
//! reference.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{binary_conv2d, real_conv2d, ConvMode, ConvSpec};
use crate::bitpack::{compute_scale, sign_quantize};
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

/// Layer shape: `c_in x c_out x k x out_h x out_w` at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl FromStr for BenchShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad shape {s:?}: {e}")))?;
        match parts[..] {
            [c_in, c_out, k, out_h, out_w] => {
                let shape = BenchShape {
                    c_in,
                    c_out,
                    k,
                    out_h,
                    out_w,
                };
                shape.spec(ConvMode::Binary).validate()?;
                if out_h == 0 || out_w == 0 {
                    return Err(Error::invalid("zero output extent"));
                }
                Ok(shape)
            }
            _ => Err(Error::invalid(format!(
                "shape {s:?} must be c_in x c_out x k x out_h x out_w"
            ))),
        }
    }
}

impl BenchShape {
    pub fn spec(&self, mode: ConvMode) -> ConvSpec {
        ConvSpec::new(self.c_in, self.c_out, self.k, 1, mode)
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub binary_ns: f64,
    pub float_ns: f64,
    pub outputs_match: bool,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.float_ns / self.binary_ns
    }
}

fn time_per_call(min_time: Duration, mut f: impl FnMut()) -> f64 {
    f();
    let mut iters = 0u32;
    let start = Instant::now();
    while iters < 3 || start.elapsed() < min_time {
        f();
        iters += 1;
    }
    start.elapsed().as_nanos() as f64 / iters as f64
}

/// Checks the binary kernel against the float reference on ±1 data (with the
/// +1 border made explicit), then times both.
pub fn run_shape(shape: BenchShape, seed: u64, min_time: Duration) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (shape.out_h, shape.out_w);
    let pm1 = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let x = FloatTensor::from_fn(&[shape.c_in, h, w], |_| rng.gen_range(-1.0..1.0));
    let bin = shape.spec(ConvMode::Binary);
    let real = shape.spec(ConvMode::Real);
    let wt = FloatTensor::from_fn(&bin.weight_shape(), |_| pm1(&mut rng));
    let alpha = compute_scale(&wt, shape.k, shape.c_in)?;
    let wb = sign_quantize(&wt)?;

    let got = binary_conv2d(&sign_quantize(&x)?, &wb, &alpha, &bin)?;

    let p = bin.padding;
    let (bh, bw) = (h + 2 * p, w + 2 * p);
    let signs = x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    let bordered = FloatTensor::from_fn(&[shape.c_in, bh, bw], |i| {
        let (c, rem) = (i / (bh * bw), i % (bh * bw));
        let (y, xx) = (rem / bw, rem % bw);
        if y < p || y >= h + p || xx < p || xx >= w + p {
            1.0
        } else {
            signs.data()[(c * h + y - p) * w + xx - p]
        }
    });
    let reference = real_conv2d(&bordered, &wt, &real)?;
    let mut outputs_match = true;
    for o in 0..shape.c_out {
        for y in 0..h {
            for xx in 0..w {
                let r = alpha.0[o] * reference.data()[(o * bh + y + p) * bw + xx + p];
                let g = got.data()[(o * h + y) * w + xx];
                if (r - g).abs() > 1e-6 * r.abs().max(1.0) {
                    outputs_match = false;
                }
            }
        }
    }

    let binary_ns = time_per_call(min_time, || {
        let a = sign_quantize(&x).expect("finite input");
        std::hint::black_box(binary_conv2d(&a, &wb, &alpha, &bin).expect("valid shapes"));
    });
    let float_ns = time_per_call(min_time, || {
        std::hint::black_box(real_conv2d(&x, &wt, &real).expect("valid shapes"));
    });
    Ok(BenchRow {
        shape,
        binary_ns,
        float_ns,
        outputs_match,
    })
}

pub const CSV_HEADER: &str = "c_in,c_out,k,out_h,out_w,binary_ns,float_ns,speedup,outputs_match";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let sh = r.shape;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.0},{:.0},{:.2},{}",
            sh.c_in,
            sh.c_out,
            sh.k,
            sh.out_h,
            sh.out_w,
            r.binary_ns,
            r.float_ns,
            r.speedup(),
            r.outputs_match
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_shapes() {
        let s: BenchShape = "64x64x3x32x32".parse().unwrap();
        assert_eq!(s.c_in, 64);
        assert_eq!(s.out_w, 32);
        assert!("64x64x5x32x32".parse::<BenchShape>().is_err());
        assert!("64x64x3".parse::<BenchShape>().is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let shapes = ["8x8x3x8x8", "70x4x1x5x6"];
        let rows: Vec<_> = shapes
            .iter()
            .map(|s| run_shape(s.parse().unwrap(), 1, Duration::from_millis(1)).unwrap())
            .collect();
        assert!(rows.iter().all(|r| r.outputs_match && r.speedup() > 0.0));
        let csv = to_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
    }
}
