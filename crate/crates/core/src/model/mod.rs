//! Network assembly: real stem, IR-Bottleneck stage, multi-branch stages of
//! MS-Blocks joined by fusion layers, and a real 1×1 heatmap head.

mod config;
mod io;

pub use config::{pruned_stages, unpruned_stages, NetworkConfig};
pub use io::{
    load, read_model, record_sizes, save, write_atomic, write_model, ModelFile, Record, FORMAT_VERSION,
    MAGIC,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Conv2d, Layer, Param, ParamKind, Pass};
use crate::blocks::{join, BinaryUnit, Block, FusionLayer, IrBottleneck};
use crate::error::{Error, Result};
use crate::kernels::{ConvMode, ConvSpec, OpCount};
use crate::tensor::FloatTensor;

/// Real 1×1 convolution with a per-channel bias.
pub struct Head {
    pub conv: Conv2d,
    pub bias: Param,
}

impl Head {
    fn new(name: &str, c_in: usize, joints: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(name, ConvSpec::new(c_in, joints, 1, 1, ConvMode::Real), rng)?,
            bias: Param::new(format!("{name}.bias"), ParamKind::Real, FloatTensor::zeros(&[joints])),
        })
    }
}

impl Layer for Head {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let mut y = self.conv.forward(x, pass)?;
        let (_, _, h, w) = y.dims4()?;
        let b = self.bias.value.data();
        for (i, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
            let bi = b[i % b.len()];
            plane.iter_mut().for_each(|v| *v += bi);
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let (_, k, h, w) = grad.dims4()?;
        let db = self.bias.grad.data_mut();
        for (i, plane) in grad.data().chunks(h * w).enumerate() {
            db[i % k] += plane.iter().sum::<f64>();
        }
        self.conv.backward(grad)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.conv.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.conv.weight, &mut self.bias]
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let (mut c, oh, ow) = self.conv.cost(h, w);
        c.flops += (self.bias.value.len() * oh * ow) as u64;
        (c, oh, ow)
    }
}

/// One multi-branch stage.
pub struct Stage {
    /// Per output branch; `None` passes the previous branch through.
    pub transitions: Vec<Option<BinaryUnit>>,
    pub branches: Vec<Vec<Block>>,
    pub fusion: FusionLayer,
    inputs: usize,
    input_shapes: Vec<Vec<usize>>,
    branch_shapes: Vec<Vec<usize>>,
}

impl Stage {
    fn source(&self, i: usize) -> usize {
        i.min(self.inputs - 1)
    }
}

/// Parameter and operation totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CostReport {
    /// Trainable scalars (latent weights counted once each).
    pub params: usize,
    /// Weights of binary convolutions, stored at 1 bit each when deployed.
    pub binary_weights: usize,
    /// Remaining real-valued trainable scalars.
    pub real_params: usize,
    /// Scaling factors of the binary convolutions.
    pub scale_factors: usize,
    pub ops: OpCount,
}

impl CostReport {
    /// Deployed size with packed binary weights and 32-bit reals.
    pub fn deployed_bytes(&self) -> usize {
        self.binary_weights.div_ceil(8) + 4 * (self.real_params + self.scale_factors)
    }

    /// Size of the same parameters as 32-bit latent values.
    pub fn latent_bytes(&self) -> usize {
        4 * self.params
    }
}

/// The assembled pose network.
pub struct Network {
    config: NetworkConfig,
    pub stem: Vec<BinaryUnit>,
    pub stage1: Vec<IrBottleneck>,
    pub stages: Vec<Stage>,
    pub head: Head,
}

impl Network {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let mode = if config.binarize {
            ConvMode::Binary
        } else {
            ConvMode::Real
        };
        let real = ConvMode::Real;
        let stem_c = config.stem_width();
        let stem = vec![
            BinaryUnit::new("stem.0", ConvSpec::new(config.in_channels, stem_c, 3, 2, real), false, rng)?,
            BinaryUnit::new("stem.1", ConvSpec::new(stem_c, stem_c, 3, 2, real), false, rng)?,
        ];
        let mid = config.mid_width();
        let mut stage1 = Vec::new();
        let mut c = stem_c;
        for i in 0..config.stages[0][0] {
            let b = IrBottleneck::new(&format!("stage1.{i}"), c, mid, mode, config.se, rng)?;
            c = b.out_channels();
            stage1.push(b);
        }

        let mut widths = vec![c];
        let mut stages = Vec::new();
        for (si, counts) in config.stages.iter().enumerate().skip(1) {
            let name = format!("stage{}", si + 1);
            let nb = counts.len();
            let mut transitions = Vec::with_capacity(nb);
            let mut branches = Vec::with_capacity(nb);
            for (i, &count) in counts.iter().enumerate() {
                let target = config.width(i);
                let src = i.min(widths.len() - 1);
                let t = if i < widths.len() {
                    (widths[i] != target).then(|| {
                        let spec = ConvSpec::new(widths[i], target, 3, 1, real);
                        BinaryUnit::new(&join(&name, &format!("transition{i}")), spec, false, rng)
                    })
                } else {
                    let spec = ConvSpec::new(widths[src], target, 3, 2, real);
                    Some(BinaryUnit::new(&join(&name, &format!("transition{i}")), spec, false, rng))
                };
                transitions.push(t.transpose()?);
                let blocks = (0..count)
                    .map(|b| {
                        Block::new(
                            config.block,
                            &join(&name, &format!("branch{i}.block{b}")),
                            target,
                            mode,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                branches.push(blocks);
            }
            let prev_branches = widths.len();
            widths = (0..nb).map(|i| config.width(i)).collect();
            let outputs = if si + 1 == config.stages.len() { 1 } else { nb };
            let fusion = FusionLayer::new(&join(&name, "fusion"), &widths, outputs, rng)?;
            stages.push(Stage {
                transitions,
                branches,
                fusion,
                inputs: prev_branches,
                input_shapes: Vec::new(),
                branch_shapes: Vec::new(),
            });
            widths.truncate(outputs);
        }
        let head = Head::new("head", widths[0], config.joints, rng)?;
        let net = Self {
            config: config.clone(),
            stem,
            stage1,
            stages,
            head,
        };
        net.check_unique_names()?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_unique_names(&self) -> Result<()> {
        let mut names: Vec<&str> = self.params().iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        match names.windows(2).find(|w| w[0] == w[1]) {
            Some(w) => Err(Error::config(format!("duplicate parameter name {}", w[0]))),
            None => Ok(()),
        }
    }

    /// Inference on `(n, c, H, W)` images; returns `(n, K, H/4, W/4)` heatmaps.
    pub fn predict(&mut self, x: &FloatTensor) -> Result<FloatTensor> {
        self.forward(x, Pass::EVAL)
    }

    /// Convolutions that must stay real: stem, transitions, fusion
    /// resamplers and the head.
    pub fn key_layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.stem.iter().map(|u| &u.body.conv).collect();
        for s in &self.stages {
            v.extend(s.transitions.iter().flatten().map(|u| &u.body.conv));
            for r in s.fusion.resamplers.iter().flatten().flatten() {
                v.extend(r.convs());
            }
        }
        v.push(&self.head.conv);
        v
    }

    /// Fails if any key layer is binarized.
    pub fn check_key_layers(&self) -> Result<()> {
        match self.key_layers().into_iter().find(|c| c.spec().mode != ConvMode::Real) {
            Some(c) => Err(Error::config(format!("key layer {} is binary", c.weight.name))),
            None => Ok(()),
        }
    }

    /// Totals for the configured input size.
    pub fn cost_report(&self) -> CostReport {
        let mut r = CostReport::default();
        for p in self.params() {
            match p.kind {
                ParamKind::BinaryWeight => {
                    r.binary_weights += p.value.len();
                    r.scale_factors += p.value.shape()[0];
                }
                ParamKind::Real => r.real_params += p.value.len(),
                ParamKind::Buffer => {}
            }
        }
        r.params = r.binary_weights + r.real_params;
        r.ops = self.cost(self.config.input_h, self.config.input_w).0;
        r
    }

    /// Single-sample heatmap for `(c, H, W)` input.
    pub fn predict_one(&mut self, image: &FloatTensor) -> Result<FloatTensor> {
        let s = image.shape().to_vec();
        let x = image.clone().reshape([vec![1], s].concat())?;
        let y = self.predict(&x)?;
        let ys = y.shape()[1..].to_vec();
        y.reshape(ys)
    }
}

/// Parameter count and operation totals of `model` at `h × w` input.
pub fn count_params_and_ops(model: &Network, h: usize, w: usize) -> (usize, OpCount) {
    (model.cost_report().params, model.cost(h, w).0)
}

impl Layer for Network {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!(
                "input {:?} must have {} channels and extents divisible by 32",
                x.shape(),
                self.config.in_channels
            )));
        }
        let mut y = x.clone();
        for u in &mut self.stem {
            y = u.forward(&y, pass)?;
        }
        for b in &mut self.stage1 {
            y = b.forward(&y, pass)?;
        }
        let mut xs = vec![y];
        for stage in &mut self.stages {
            stage.input_shapes = xs.iter().map(|t| t.shape().to_vec()).collect();
            let mut ys = Vec::with_capacity(stage.branches.len());
            for i in 0..stage.branches.len() {
                let src = &xs[stage.source(i)];
                let mut b = match &mut stage.transitions[i] {
                    Some(t) => t.forward(src, pass)?,
                    None => src.clone(),
                };
                for blk in &mut stage.branches[i] {
                    b = blk.forward(&b, pass)?;
                }
                ys.push(b);
            }
            stage.branch_shapes = ys.iter().map(|t| t.shape().to_vec()).collect();
            xs = stage.fusion.forward(&ys, pass)?;
        }
        self.head.forward(&xs[0], pass)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let mut gs = vec![self.head.backward(grad)?];
        for stage in self.stages.iter_mut().rev() {
            if stage.branch_shapes.is_empty() {
                return Err(Error::MissingGradient("network backward without forward".into()));
            }
            let branch_grads = stage.fusion.backward(&gs, &stage.branch_shapes)?;
            let mut prev: Vec<FloatTensor> =
                stage.input_shapes.iter().map(|s| FloatTensor::zeros(s)).collect();
            for (i, mut g) in branch_grads.into_iter().enumerate() {
                for blk in stage.branches[i].iter_mut().rev() {
                    g = blk.backward(&g)?;
                }
                if let Some(t) = &mut stage.transitions[i] {
                    g = t.backward(&g)?;
                }
                let src = stage.source(i);
                prev[src].add_assign(&g)?;
            }
            stage.branch_shapes.clear();
            gs = prev;
        }
        let mut g = gs.swap_remove(0);
        for b in self.stage1.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        for u in self.stem.iter_mut().rev() {
            g = u.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.stem.iter().flat_map(|u| u.params()).collect();
        v.extend(self.stage1.iter().flat_map(|b| b.params()));
        for s in &self.stages {
            v.extend(s.transitions.iter().flatten().flat_map(|t| t.params()));
            v.extend(s.branches.iter().flatten().flat_map(|b| b.params()));
            v.extend(s.fusion.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.stem.iter_mut().flat_map(|u| u.params_mut()).collect();
        v.extend(self.stage1.iter_mut().flat_map(|b| b.params_mut()));
        for s in &mut self.stages {
            v.extend(s.transitions.iter_mut().flatten().flat_map(|t| t.params_mut()));
            v.extend(s.branches.iter_mut().flatten().flat_map(|b| b.params_mut()));
            v.extend(s.fusion.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let mut total = OpCount::default();
        let (mut h, mut w) = (h, w);
        for u in &self.stem {
            let (c, oh, ow) = u.cost(h, w);
            total += c;
            (h, w) = (oh, ow);
        }
        for b in &self.stage1 {
            total += b.cost(h, w).0;
        }
        for s in &self.stages {
            for (i, branch) in s.branches.iter().enumerate() {
                if let Some(t) = &s.transitions[i] {
                    let src = s.source(i);
                    total += t.cost(h >> src, w >> src).0;
                }
                for blk in branch {
                    total += blk.cost(h >> i, w >> i).0;
                }
            }
            total += s.fusion.cost(h, w);
        }
        total += self.head.cost(h, w).0;
        (total, h, w)
    }
}
