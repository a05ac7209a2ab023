use rand::Rng;

use super::{join, seq_backward, seq_cost, seq_forward, BinaryUnit, ConvBn, SqueezeExcite};
use crate::autograd::{Layer, Param, Pass};
use crate::error::{Error, Result};
use crate::kernels::{ConvMode, ConvSpec, OpCount};
use crate::tensor::FloatTensor;

pub const EXPANSION: usize = 4;

struct BottleneckCache {
    path_out: FloatTensor,
    weights: Option<FloatTensor>,
}

/// Information-reconstruction bottleneck.
///
/// `out = shortcut(x) + s ⊙ path(x)` where `path` is a 1×1 → 3×3 → 1×1 chain
/// of Binary Units (contract to `mid`, expand to `4·mid`) and `s` holds
/// squeeze-excite weights computed from the block input. The shortcut is the
/// identity when widths agree and a real-valued 1×1 projection otherwise.
/// Without SE the block is a plain binary bottleneck.
pub struct IrBottleneck {
    pub path: Vec<BinaryUnit>,
    pub se: Option<SqueezeExcite>,
    pub shortcut: Option<ConvBn>,
    c_in: usize,
    c_out: usize,
    cache: Option<BottleneckCache>,
}

impl IrBottleneck {
    pub fn new(
        name: &str,
        c_in: usize,
        mid: usize,
        mode: ConvMode,
        with_se: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_in == 0 || mid == 0 {
            return Err(Error::config(format!("{name}: empty bottleneck")));
        }
        let c_out = mid * EXPANSION;
        let path = vec![
            BinaryUnit::new(&join(name, "unit0"), ConvSpec::new(c_in, mid, 1, 1, mode), false, rng)?,
            BinaryUnit::new(&join(name, "unit1"), ConvSpec::new(mid, mid, 3, 1, mode), true, rng)?,
            BinaryUnit::new(&join(name, "unit2"), ConvSpec::new(mid, c_out, 1, 1, mode), false, rng)?,
        ];
        let se = with_se.then(|| SqueezeExcite::new(&join(name, "se"), c_in, c_out, rng));
        let shortcut = if c_in != c_out {
            Some(ConvBn::new(
                &join(name, "shortcut"),
                ConvSpec::new(c_in, c_out, 1, 1, ConvMode::Real),
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            path,
            se,
            shortcut,
            c_in,
            c_out,
            cache: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }
}

fn scale_channels(p: &FloatTensor, s: &FloatTensor) -> Result<FloatTensor> {
    let (n, c, h, w) = p.dims4()?;
    if s.shape() != [n, c] {
        return Err(Error::config(format!(
            "SE weights {:?} do not match path {:?}",
            s.shape(),
            p.shape()
        )));
    }
    let plane = h * w;
    let mut out = p.clone();
    for (chunk, &sv) in out.data_mut().chunks_mut(plane).zip(s.data()) {
        chunk.iter_mut().for_each(|v| *v *= sv);
    }
    Ok(out)
}

impl Layer for IrBottleneck {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.c_in {
            return Err(Error::config(format!(
                "bottleneck expects {} channels, got {c}",
                self.c_in
            )));
        }
        let path_out = seq_forward(&mut self.path, x, pass)?;
        let weights = match &mut self.se {
            Some(se) => Some(se.forward(x, pass)?),
            None => None,
        };
        let mut out = match &mut self.shortcut {
            Some(sc) => sc.forward(x, pass)?,
            None => x.clone(),
        };
        match &weights {
            Some(s) => out.add_assign(&scale_channels(&path_out, s)?)?,
            None => out.add_assign(&path_out)?,
        }
        self.cache = pass.train.then_some(BottleneckCache { path_out, weights });
        Ok(out)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::MissingGradient("bottleneck backward without forward".into()))?;
        let mut dx = match &mut self.shortcut {
            Some(sc) => sc.backward(grad)?,
            None => grad.clone(),
        };
        let dpath = match (&cache.weights, &mut self.se) {
            (Some(s), Some(se)) => {
                let (n, c, h, w) = grad.dims4()?;
                let plane = h * w;
                let mut ds = vec![0.0; n * c];
                for (i, d) in ds.iter_mut().enumerate() {
                    let g = &grad.data()[i * plane..(i + 1) * plane];
                    let p = &cache.path_out.data()[i * plane..(i + 1) * plane];
                    *d = g.iter().zip(p).map(|(a, b)| a * b).sum();
                }
                let ds = FloatTensor::from_parts(vec![n, c], ds);
                dx.add_assign(&se.backward(&ds)?)?;
                scale_channels(grad, s)?
            }
            _ => grad.clone(),
        };
        dx.add_assign(&seq_backward(&mut self.path, &dpath)?)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.path.iter().flat_map(|u| u.params()).collect();
        if let Some(se) = &self.se {
            v.extend(se.params());
        }
        if let Some(sc) = &self.shortcut {
            v.extend(sc.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.path.iter_mut().flat_map(|u| u.params_mut()).collect();
        if let Some(se) = &mut self.se {
            v.extend(se.params_mut());
        }
        if let Some(sc) = &mut self.shortcut {
            v.extend(sc.params_mut());
        }
        v
    }

    fn cost(&self, h: usize, w: usize) -> (OpCount, usize, usize) {
        let (mut c, oh, ow) = seq_cost(&self.path, h, w);
        if let Some(se) = &self.se {
            c += se.cost();
        }
        if let Some(sc) = &self.shortcut {
            c += sc.cost(h, w).0;
        }
        (c, oh, ow)
    }
}
