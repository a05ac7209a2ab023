use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, seq_backward, seq_cost, seq_forward, BinaryUnit, ConvBn};
use crate::autograd::{Layer, PRelu, Param, Pass};
use crate::error::{Error, Result};
use crate::kernels::{ConvMode, ConvSpec, OpCount};
use crate::tensor::FloatTensor;

/// `perm[out] = in` for the shuffle of `n` channels laid out as
/// `[A (n/2), B (n/4), C (n/4)]`: repeating groups of two A channels, one B,
/// one C.
pub fn shuffle_permutation(n: usize) -> Result<Vec<usize>> {
    if n == 0 || n % 4 != 0 {
        return Err(Error::config(format!("channel shuffle needs n divisible by 4, got {n}")));
    }
    let q = n / 4;
    let mut perm = Vec::with_capacity(n);
    for g in 0..q {
        perm.extend([2 * g, 2 * g + 1, 2 * q + g, 3 * q + g]);
    }
    Ok(perm)
}

fn permute_channels(x: &FloatTensor, perm: &[usize], inverse: bool) -> Result<FloatTensor> {
    let (n, c, h, w) = x.dims4()?;
    if c != perm.len() {
        return Err(Error::config(format!(
            "permutation over {} channels applied to {c}",
            perm.len()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let src = x.sample(s);
        let dst = &mut out[s * c * plane..(s + 1) * c * plane];
        for (o, &i) in perm.iter().enumerate() {
            let (from, to) = if inverse { (o, i) } else { (i, o) };
            dst[to * plane..(to + 1) * plane].copy_from_slice(&src[from * plane..(from + 1) * plane]);
        }
    }
    Ok(FloatTensor::from_parts(x.shape().to_vec(), out))
}

/// Interleaves `[A…, B…, C…]` channels as `A0 A1 B0 C0 A2 A3 B1 C1 …`.
pub fn channel_shuffle(x: &FloatTensor) -> Result<FloatTensor> {
    let (_, c, _, _) = x.dims4()?;
    permute_channels(x, &shuffle_permutation(c)?, false)
}

pub fn channel_unshuffle(x: &FloatTensor) -> Result<FloatTensor> {
    let (_, c, _, _) = x.dims4()?;
    permute_channels(x, &shuffle_permutation(c)?, true)
}

/// Multi-scale block: channels split `n/2 : n/4 : n/4` into stacks of three,
/// two and one 3×3 Binary Units (7×7, 5×5 and 3×3 receptive fields),
/// concatenated and channel-shuffled.
pub struct MsBlock {
    pub branches: [Vec<BinaryUnit>; 3],
    width: usize,
}

impl MsBlock {
    pub fn new(name: &str, width: usize, mode: ConvMode, rng: &mut impl Rng) -> Result<Self> {
        if width == 0 || width % 4 != 0 {
            return Err(Error::config(format!("MS-Block width {width} not divisible by 4")));
        }
        let mut branch = |tag: &str, depth: usize, c: usize| -> Result<Vec<BinaryUnit>> {
            (0..depth)
                .map(|i| {
                    BinaryUnit::new(
                        &join(name, &format!("{tag}{i}")),
                        ConvSpec::new(c, c, 3, 1, mode),
                        true,
                        rng,
                    )
                })
                .collect()
        };
        let branches = [
            branch("a", 3, width / 2)?,
            branch("b", 2, width / 4)?,
            branch("c", 1, width / 4)?,
        ];
        Ok(Self { branches, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn splits(&self) -> [(usize, usize); 3] {
        let (h, q) = (self.width / 2, self.width / 4);
        [(0, h), (h, q), (h + q, q)]
    }

    /// Receptive field (in input pixels) of each branch.
    pub fn receptive_fields(&self) -> [usize; 3] {
        self.branches.each_ref().map(|b| {
            b.iter()
                .map(|u| u.body.conv.spec().k - 1)
                .sum::<usize>()
                + 1
        })
    }
}

impl Layer for MsBlock {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.width {
            return Err(Error::config(format!("MS-Block expects {} channels, got {c}", self.width)));
        }
        let splits = self.splits();
        let mut outs = Vec::with_capacity(3);
        for (branch, (start, count)) in self.branches.iter_mut().zip(splits) {
            let part = x.narrow_channels(start, count)?;
            outs.push(seq_forward(branch, &part, pass)?);
        }
        let cat = FloatTensor::cat_channels(&[&outs[0], &outs[1], &outs[2]])?;
        channel_shuffle(&cat)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let g = channel_unshuffle(grad)?;
        let splits = self.splits();
        let mut parts = Vec::with_capacity(3);
        for (branch, (start, count)) in self.branches.iter_mut().zip(splits) {
            parts.push(seq_backward(branch, &g.narrow_channels(start, count)?)?);
        }
        FloatTensor::cat_channels(&[&parts[0], &parts[1], &parts[2]])
    }

    fn params(&self) -> Vec<&Param> {
        self.branches.iter().flatten().flat_map(|u| u.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branches
            .iter_mut()
            .flatten()
            .flat_map(|u| u.params_mut())
            .collect()
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let c = self.branches.iter().map(|b| seq_cost(b, h, w).0).sum();
        (c, h, w)
    }
}

/// Directly binarized basic block:
/// `PReLU(x + BN(conv(PReLU(BN(conv(x))))))` with two 3×3 convolutions.
pub struct BasicBlock {
    pub first: BinaryUnit,
    pub second: ConvBn,
    pub act: PRelu,
    cache: bool,
}

impl BasicBlock {
    pub fn new(name: &str, width: usize, mode: ConvMode, rng: &mut impl Rng) -> Result<Self> {
        let spec = ConvSpec::new(width, width, 3, 1, mode);
        Ok(Self {
            first: BinaryUnit::new(&join(name, "unit0"), spec, false, rng)?,
            second: ConvBn::new(&join(name, "unit1"), spec, rng)?,
            act: PRelu::new(&join(name, "prelu"), width, 0.25),
            cache: false,
        })
    }
}

impl Layer for BasicBlock {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let h = self.first.forward(x, pass)?;
        let mut y = self.second.forward(&h, pass)?;
        y.add_assign(x)?;
        self.cache = pass.train;
        self.act.forward(&y, pass)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        if !std::mem::take(&mut self.cache) {
            return Err(Error::MissingGradient("basic block backward without forward".into()));
        }
        let g = self.act.backward(grad)?;
        let mut dx = self.first.backward(&self.second.backward(&g)?)?;
        dx.add_assign(&g)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v.extend(self.act.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v.extend(self.act.params_mut());
        v
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let c = self.first.cost(h, w).0 + self.second.cost(h, w).0;
        (c, h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Ms,
    Basic,
}

/// Block used in the multi-branch stages.
pub enum Block {
    Ms(MsBlock),
    Basic(BasicBlock),
}

impl Block {
    pub fn new(
        kind: BlockKind,
        name: &str,
        width: usize,
        mode: ConvMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Ms => Block::Ms(MsBlock::new(name, width, mode, rng)?),
            BlockKind::Basic => Block::Basic(BasicBlock::new(name, width, mode, rng)?),
        })
    }

    fn inner(&self) -> &dyn Layer {
        match self {
            Block::Ms(b) => b,
            Block::Basic(b) => b,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Layer {
        match self {
            Block::Ms(b) => b,
            Block::Basic(b) => b,
        }
    }
}

impl Layer for Block {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        self.inner_mut().forward(x, pass)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        self.inner_mut().backward(grad)
    }

    fn params(&self) -> Vec<&Param> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.inner_mut().params_mut()
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        self.inner().cost(h, w)
    }
}
