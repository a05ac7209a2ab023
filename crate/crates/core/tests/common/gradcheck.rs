//! Central finite-difference oracle for layer and block gradients.
//!
//! A target exposes a scalar loss (a fixed random projection of its outputs)
//! and a set of numbered slots: input tensors and trainable parameters. The
//! checker compares the analytic gradient of sampled slot entries against
//! `(L(v + h) − L(v − h)) / 2h`.

#![allow(dead_code)]

use bipose_core::autograd::{Layer, Param, ParamKind, Pass};
use bipose_core::blocks::FusionLayer;
use bipose_core::error::Result;
use bipose_core::tensor::FloatTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;

pub trait GradTarget {
    /// Forward pass reduced to a scalar.
    fn loss(&mut self, pass: Pass) -> Result<f64>;
    /// Backward pass for the most recent `loss`; fills slot gradients.
    fn backprop(&mut self) -> Result<()>;
    fn slot_count(&mut self) -> usize;
    fn slot_name(&mut self, i: usize) -> String;
    fn slot_len(&mut self, i: usize) -> usize;
    fn get(&mut self, i: usize, j: usize) -> f64;
    fn set(&mut self, i: usize, j: usize, v: f64);
    fn grad(&mut self, i: usize, j: usize) -> f64;
    fn zero_grads(&mut self);
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub slot: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub slots: usize,
    pub worst_rel: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// Relative error, treating differences under the roundoff floor as exact.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

/// Checks `per_slot` random entries of every slot at relative tolerance `tol`.
pub fn check(
    t: &mut dyn GradTarget,
    pass: Pass,
    per_slot: usize,
    tol: f64,
    seed: u64,
) -> Result<GradReport> {
    check_with_step(t, pass, per_slot, tol, seed, STEP)
}

/// As [`check`] with a custom difference step.
pub fn check_with_step(
    t: &mut dyn GradTarget,
    pass: Pass,
    per_slot: usize,
    tol: f64,
    seed: u64,
    step: f64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.zero_grads();
    t.loss(pass)?;
    t.backprop()?;
    let mut report = GradReport::default();
    let slots = t.slot_count();
    report.slots = slots;
    let mut samples = Vec::new();
    for i in 0..slots {
        let len = t.slot_len(i);
        for _ in 0..per_slot.min(len) {
            let j = rng.gen_range(0..len);
            samples.push((i, j, t.grad(i, j)));
        }
    }
    for (i, j, analytic) in samples {
        let v = t.get(i, j);
        t.set(i, j, v + step);
        let lp = t.loss(pass)?;
        t.set(i, j, v - step);
        let lm = t.loss(pass)?;
        t.set(i, j, v);
        let numeric = (lp - lm) / (2.0 * step);
        let e = rel_err(analytic, numeric, 1e-12 / step);
        report.worst_rel = report.worst_rel.max(e);
        report.checked += 1;
        if e > tol {
            report.mismatches.push(Mismatch {
                slot: t.slot_name(i),
                index: j,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}

pub fn projection(shape: &[usize], rng: &mut impl Rng) -> FloatTensor {
    FloatTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn dot(a: &FloatTensor, b: &FloatTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Pins every binary weight's scale so perturbations do not move α.
pub fn freeze_scales(params: Vec<&mut Param>) {
    for p in params {
        if p.kind == ParamKind::BinaryWeight {
            p.freeze_scale().expect("conv weight");
        }
    }
}

/// Single-input layer wrapped as a gradient target.
pub struct LayerTarget<L: Layer> {
    pub layer: L,
    pub x: FloatTensor,
    pub dx: Option<FloatTensor>,
    proj: Option<FloatTensor>,
    seed: u64,
}

impl<L: Layer> LayerTarget<L> {
    pub fn new(mut layer: L, x: FloatTensor, seed: u64) -> Self {
        freeze_scales(layer.params_mut());
        Self {
            layer,
            x,
            dx: None,
            proj: None,
            seed,
        }
    }

    fn trainable(&mut self) -> Vec<&mut Param> {
        self.layer
            .params_mut()
            .into_iter()
            .filter(|p| p.is_trainable())
            .collect()
    }
}

impl<L: Layer> GradTarget for LayerTarget<L> {
    fn loss(&mut self, pass: Pass) -> Result<f64> {
        let y = self.layer.forward(&self.x, pass)?;
        let seed = self.seed;
        let proj = self.proj.get_or_insert_with(|| {
            projection(y.shape(), &mut ChaCha8Rng::seed_from_u64(seed))
        });
        Ok(dot(&y, proj))
    }

    fn backprop(&mut self) -> Result<()> {
        let proj = self.proj.clone().expect("loss before backprop");
        self.dx = Some(self.layer.backward(&proj)?);
        Ok(())
    }

    fn slot_count(&mut self) -> usize {
        1 + self.trainable().len()
    }

    fn slot_name(&mut self, i: usize) -> String {
        if i == 0 {
            "input".into()
        } else {
            self.trainable()[i - 1].name.clone()
        }
    }

    fn slot_len(&mut self, i: usize) -> usize {
        if i == 0 {
            self.x.len()
        } else {
            self.trainable()[i - 1].value.len()
        }
    }

    fn get(&mut self, i: usize, j: usize) -> f64 {
        if i == 0 {
            self.x.data()[j]
        } else {
            self.trainable()[i - 1].value.data()[j]
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        if i == 0 {
            self.x.data_mut()[j] = v;
        } else {
            self.trainable()[i - 1].value.data_mut()[j] = v;
        }
    }

    fn grad(&mut self, i: usize, j: usize) -> f64 {
        if i == 0 {
            self.dx.as_ref().expect("backprop first").data()[j]
        } else {
            self.trainable()[i - 1].grad.data()[j]
        }
    }

    fn zero_grads(&mut self) {
        for p in self.layer.params_mut() {
            p.zero_grad();
        }
    }
}

/// Multi-input fusion layer as a gradient target; the loss projects every
/// output branch.
pub struct FusionTarget {
    pub f: FusionLayer,
    pub xs: Vec<FloatTensor>,
    dxs: Vec<FloatTensor>,
    proj: Vec<FloatTensor>,
    seed: u64,
}

impl FusionTarget {
    pub fn new(f: FusionLayer, xs: Vec<FloatTensor>, seed: u64) -> Self {
        Self {
            f,
            xs,
            dxs: Vec::new(),
            proj: Vec::new(),
            seed,
        }
    }

    fn trainable(&mut self) -> Vec<&mut Param> {
        self.f.params_mut().into_iter().filter(|p| p.is_trainable()).collect()
    }
}

impl GradTarget for FusionTarget {
    fn loss(&mut self, pass: Pass) -> Result<f64> {
        let ys = self.f.forward(&self.xs, pass)?;
        if self.proj.is_empty() {
            let mut r = ChaCha8Rng::seed_from_u64(self.seed);
            self.proj = ys.iter().map(|y| projection(y.shape(), &mut r)).collect();
        }
        Ok(ys.iter().zip(&self.proj).map(|(y, p)| dot(y, p)).sum())
    }

    fn backprop(&mut self) -> Result<()> {
        let shapes: Vec<Vec<usize>> = self.xs.iter().map(|x| x.shape().to_vec()).collect();
        self.dxs = self.f.backward(&self.proj.clone(), &shapes)?;
        Ok(())
    }

    fn slot_count(&mut self) -> usize {
        self.xs.len() + self.trainable().len()
    }

    fn slot_name(&mut self, i: usize) -> String {
        let n = self.xs.len();
        if i < n {
            format!("input{i}")
        } else {
            self.trainable()[i - n].name.clone()
        }
    }

    fn slot_len(&mut self, i: usize) -> usize {
        let n = self.xs.len();
        if i < n {
            self.xs[i].len()
        } else {
            self.trainable()[i - n].value.len()
        }
    }

    fn get(&mut self, i: usize, j: usize) -> f64 {
        let n = self.xs.len();
        if i < n {
            self.xs[i].data()[j]
        } else {
            self.trainable()[i - n].value.data()[j]
        }
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.xs.len();
        if i < n {
            self.xs[i].data_mut()[j] = v;
        } else {
            self.trainable()[i - n].value.data_mut()[j] = v;
        }
    }

    fn grad(&mut self, i: usize, j: usize) -> f64 {
        let n = self.xs.len();
        if i < n {
            self.dxs[i].data()[j]
        } else {
            self.trainable()[i - n].grad.data()[j]
        }
    }

    fn zero_grads(&mut self) {
        self.f.params_mut().into_iter().for_each(|p| p.zero_grad());
    }
}
