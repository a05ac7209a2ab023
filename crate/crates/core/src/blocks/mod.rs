//! Building blocks: Binary Unit, SE-reweighted IR-Bottleneck, MS-Block with
//! channel shuffle, the plain binarized basic block, and cross-resolution
//! fusion.

mod bottleneck;
mod fusion;
mod msblock;
mod se;

pub use bottleneck::IrBottleneck;
pub use fusion::{FusionLayer, Resampler};
pub use msblock::{
    channel_shuffle, channel_unshuffle, shuffle_permutation, BasicBlock, Block, BlockKind, MsBlock,
};
pub use se::{se_weights, SqueezeExcite, SE_REDUCTION};

use rand::Rng;

use crate::autograd::{BatchNorm2d, Conv2d, Layer, PRelu, Param, Pass};
use crate::error::{Error, Result};
use crate::kernels::{ConvMode, ConvSpec, OpCount};
use crate::tensor::FloatTensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convolution followed by batch normalization.
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&join(name, "conv"), spec, rng)?,
            bn: BatchNorm2d::new(&join(name, "bn"), spec.c_out),
        })
    }
}

impl Layer for ConvBn {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let y = self.conv.forward(x, pass)?;
        self.bn.forward(&y, pass)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let g = self.bn.backward(grad)?;
        self.conv.backward(&g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        self.conv.cost(h, w)
    }
}

/// `PReLU(x + BN(conv(x)))`, or `PReLU(BN(conv(x)))` without the shortcut.
///
/// In binary mode the convolution binarizes its input and weights. The same
/// unit with a real convolution serves the real-valued key layers and the
/// teacher network.
pub struct BinaryUnit {
    pub body: ConvBn,
    pub act: PRelu,
    residual: bool,
}

impl BinaryUnit {
    pub fn new(name: &str, spec: ConvSpec, residual: bool, rng: &mut impl Rng) -> Result<Self> {
        if residual && (spec.c_in != spec.c_out || spec.stride != 1) {
            return Err(Error::config(format!(
                "{name}: residual unit needs equal channels and stride 1, got {spec:?}"
            )));
        }
        Ok(Self {
            body: ConvBn::new(name, spec, rng)?,
            act: PRelu::new(&join(name, "prelu"), spec.c_out, 0.25),
            residual,
        })
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn mode(&self) -> ConvMode {
        self.body.conv.spec().mode
    }
}

impl Layer for BinaryUnit {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let mut y = self.body.forward(x, pass)?;
        if self.residual {
            y.add_assign(x).map_err(|e| Error::config(format!("residual: {e}")))?;
        }
        self.act.forward(&y, pass)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let g = self.act.backward(grad)?;
        let mut dx = self.body.backward(&g)?;
        if self.residual {
            dx.add_assign(&g)?;
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.body.params();
        v.extend(self.act.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.body.params_mut();
        v.extend(self.act.params_mut());
        v
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        self.body.cost(h, w)
    }
}

/// Runs layers in order.
pub(crate) fn seq_forward<L: Layer>(layers: &mut [L], x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
    let mut y = x.clone();
    for l in layers.iter_mut() {
        y = l.forward(&y, pass)?;
    }
    Ok(y)
}

pub(crate) fn seq_backward<L: Layer>(layers: &mut [L], grad: &FloatTensor) -> Result<FloatTensor> {
    let mut g = grad.clone();
    for l in layers.iter_mut().rev() {
        g = l.backward(&g)?;
    }
    Ok(g)
}

pub(crate) fn seq_cost<L: Layer>(layers: &[L], h: usize, w: usize) -> (OpCount, usize, usize) {
    let (mut total, mut h, mut w) = (OpCount::default(), h, w);
    for l in layers {
        let (c, oh, ow) = l.cost(h, w);
        total += c;
        h = oh;
        w = ow;
    }
    (total, h, w)
}
