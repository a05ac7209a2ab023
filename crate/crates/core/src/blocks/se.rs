use rand::Rng;

use super::join;
use crate::autograd::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    Layer, Linear, Param, Pass,
};
use crate::error::{Error, Result};
use crate::kernels::OpCount;
use crate::tensor::FloatTensor;

pub const SE_REDUCTION: usize = 4;

struct SeCache {
    h: usize,
    w: usize,
    hidden: FloatTensor,
    s: FloatTensor,
}

/// Channel attention: `s = sigmoid(FC(ReLU(FC(avgpool(x)))))`.
///
/// The output width may differ from the input width so the weights can scale
/// a path whose channel count differs from the block input.
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
    cache: Option<SeCache>,
}

impl SqueezeExcite {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let hidden = (c_in / SE_REDUCTION).max(1);
        Self {
            fc1: Linear::new(&join(name, "fc1"), c_in, hidden, rng),
            fc2: Linear::new(&join(name, "fc2"), hidden, c_out, rng),
            cache: None,
        }
    }

    /// Per-sample, per-channel weights of shape `(n, c_out)`, each in (0, 1).
    pub fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        let (_, _, h, w) = x.dims4()?;
        let pooled = global_avg_pool(x)?;
        let hidden = self.fc1.forward(&pooled, pass)?;
        let act = relu(&hidden);
        let s = sigmoid(&self.fc2.forward(&act, pass)?);
        self.cache = pass.train.then(|| SeCache {
            h,
            w,
            hidden,
            s: s.clone(),
        });
        Ok(s)
    }

    /// Takes `d loss / d s` and returns the gradient of the block input.
    pub fn backward(&mut self, ds: &FloatTensor) -> Result<FloatTensor> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| Error::MissingGradient("squeeze-excite backward without forward".into()))?;
        let g = sigmoid_backward(&c.s, ds)?;
        let g = self.fc2.backward(&g)?;
        let g = relu_backward(&c.hidden, &g)?;
        let g = self.fc1.backward(&g)?;
        global_avg_pool_backward(&g, c.h, c.w)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }

    pub fn cost(&self) -> OpCount {
        self.fc1.cost(1, 1).0 + self.fc2.cost(1, 1).0
    }
}

/// Inference-mode SE weights for `x`.
pub fn se_weights(se: &mut SqueezeExcite, x: &FloatTensor) -> Result<FloatTensor> {
    se.forward(x, Pass::EVAL)
}
