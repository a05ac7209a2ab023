use rand::Rng;

use super::{join, seq_backward, seq_cost, seq_forward, BinaryUnit, ConvBn};
use crate::autograd::{Layer, Param, Pass};
use crate::error::{Error, Result};
use crate::kernels::{sum_pool, upsample_nearest, ConvMode, ConvSpec, OpCount};
use crate::tensor::FloatTensor;

/// Moves a branch to another branch's resolution and width.
pub enum Resampler {
    /// Real 1×1 conv + BN, then nearest upsampling by `factor`.
    Up { conv: ConvBn, factor: usize },
    /// Real stride-2 3×3 conv + BN + PReLU steps ending in a conv + BN step
    /// without activation.
    Down { steps: Vec<BinaryUnit>, last: ConvBn },
}

impl Resampler {
    pub fn up(name: &str, c_in: usize, c_out: usize, factor: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Resampler::Up {
            conv: ConvBn::new(name, ConvSpec::new(c_in, c_out, 1, 1, ConvMode::Real), rng)?,
            factor,
        })
    }

    pub fn down(name: &str, c_in: usize, c_out: usize, hops: usize, rng: &mut impl Rng) -> Result<Self> {
        if hops == 0 {
            return Err(Error::config(format!("{name}: downsampler with no hops")));
        }
        let steps = (0..hops - 1)
            .map(|i| {
                BinaryUnit::new(
                    &join(name, &format!("step{i}")),
                    ConvSpec::new(c_in, c_in, 3, 2, ConvMode::Real),
                    false,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let last = ConvBn::new(
            &join(name, &format!("step{}", hops - 1)),
            ConvSpec::new(c_in, c_out, 3, 2, ConvMode::Real),
            rng,
        )?;
        Ok(Resampler::Down { steps, last })
    }

    /// Every convolution inside the resampler.
    pub fn convs(&self) -> Vec<&crate::autograd::Conv2d> {
        match self {
            Resampler::Up { conv, .. } => vec![&conv.conv],
            Resampler::Down { steps, last } => steps
                .iter()
                .map(|s| &s.body.conv)
                .chain(std::iter::once(&last.conv))
                .collect(),
        }
    }
}

impl Layer for Resampler {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        match self {
            Resampler::Up { conv, factor } => upsample_nearest(&conv.forward(x, pass)?, *factor),
            Resampler::Down { steps, last } => last.forward(&seq_forward(steps, x, pass)?, pass),
        }
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        match self {
            Resampler::Up { conv, factor } => conv.backward(&sum_pool(grad, *factor)?),
            Resampler::Down { steps, last } => seq_backward(steps, &last.backward(grad)?),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Resampler::Up { conv, .. } => conv.params(),
            Resampler::Down { steps, last } => {
                let mut v: Vec<&Param> = steps.iter().flat_map(|s| s.params()).collect();
                v.extend(last.params());
                v
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Resampler::Up { conv, .. } => conv.params_mut(),
            Resampler::Down { steps, last } => {
                let mut v: Vec<&mut Param> = steps.iter_mut().flat_map(|s| s.params_mut()).collect();
                v.extend(last.params_mut());
                v
            }
        }
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        match self {
            Resampler::Up { conv, factor } => {
                let (c, oh, ow) = conv.cost(h, w);
                (c, oh * factor, ow * factor)
            }
            Resampler::Down { steps, last } => {
                let (c, oh, ow) = seq_cost(steps, h, w);
                let (c2, oh, ow) = last.cost(oh, ow);
                (c + c2, oh, ow)
            }
        }
    }
}

/// Cross-resolution exchange. Output branch `j` is the sum over input branches
/// `i` of `x_i` resampled to branch `j`; the `i == j` term is the identity.
pub struct FusionLayer {
    widths: Vec<usize>,
    /// `resamplers[j][i]`, `None` on the diagonal.
    pub resamplers: Vec<Vec<Option<Resampler>>>,
}

impl FusionLayer {
    /// Fuses `widths.len()` branches into the first `outputs` branches.
    pub fn new(name: &str, widths: &[usize], outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || outputs == 0 || outputs > widths.len() {
            return Err(Error::config(format!(
                "{name}: cannot fuse {} branches into {outputs}",
                widths.len()
            )));
        }
        let mut resamplers = Vec::with_capacity(outputs);
        for j in 0..outputs {
            let mut row = Vec::with_capacity(widths.len());
            for (i, &c) in widths.iter().enumerate() {
                let tag = join(name, &format!("{i}to{j}"));
                row.push(match i.cmp(&j) {
                    std::cmp::Ordering::Equal => None,
                    std::cmp::Ordering::Greater => {
                        Some(Resampler::up(&tag, c, widths[j], 1 << (i - j), rng)?)
                    }
                    std::cmp::Ordering::Less => Some(Resampler::down(&tag, c, widths[j], j - i, rng)?),
                });
            }
            resamplers.push(row);
        }
        Ok(Self {
            widths: widths.to_vec(),
            resamplers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn outputs(&self) -> usize {
        self.resamplers.len()
    }

    fn check_pyramid(&self, xs: &[FloatTensor]) -> Result<()> {
        if xs.len() != self.widths.len() {
            return Err(Error::config(format!(
                "fusion expects {} branches, got {}",
                self.widths.len(),
                xs.len()
            )));
        }
        let (n0, _, h0, w0) = xs[0].dims4()?;
        for (i, (x, &c)) in xs.iter().zip(&self.widths).enumerate() {
            let (n, ci, h, w) = x.dims4()?;
            if n != n0 || ci != c || h << i != h0 || w << i != w0 {
                return Err(Error::config(format!(
                    "inconsistent pyramid: branch {i} has shape {:?}, expected [{n0}, {c}, {}, {}]",
                    x.shape(),
                    h0 >> i,
                    w0 >> i
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, xs: &[FloatTensor], pass: Pass) -> Result<Vec<FloatTensor>> {
        self.check_pyramid(xs)?;
        let mut out = Vec::with_capacity(self.outputs());
        for (j, row) in self.resamplers.iter_mut().enumerate() {
            let mut acc = xs[j].clone();
            for (i, r) in row.iter_mut().enumerate() {
                if let Some(r) = r {
                    acc.add_assign(&r.forward(&xs[i], pass)?)?;
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Takes one gradient per output branch and returns one per input branch.
    pub fn backward(&mut self, grads: &[FloatTensor], inputs_shape: &[Vec<usize>]) -> Result<Vec<FloatTensor>> {
        if grads.len() != self.outputs() || inputs_shape.len() != self.widths.len() {
            return Err(Error::config("fusion backward arity mismatch"));
        }
        let mut dx: Vec<FloatTensor> = inputs_shape.iter().map(|s| FloatTensor::zeros(s)).collect();
        for (j, (row, g)) in self.resamplers.iter_mut().zip(grads).enumerate() {
            dx[j].add_assign(g)?;
            for (i, r) in row.iter_mut().enumerate() {
                if let Some(r) = r {
                    dx[i].add_assign(&r.backward(g)?)?;
                }
            }
        }
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.resamplers.iter().flatten().flatten().flat_map(|r| r.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.resamplers
            .iter_mut()
            .flatten()
            .flatten()
            .flat_map(|r| r.params_mut())
            .collect()
    }

    /// Cost for a branch-0 resolution of `h × w`.
    pub fn cost(&self, h: usize, w: usize) -> OpCount {
        let mut total = OpCount::default();
        for row in &self.resamplers {
            for (i, r) in row.iter().enumerate() {
                if let Some(r) = r {
                    total += r.cost(h >> i, w >> i).0;
                }
            }
        }
        total
    }
}
