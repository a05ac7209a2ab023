//! Heatmap losses: AWing, pixel-level KL distillation, MSE, and their blend.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

/// Lower clamp applied to heatmap values before they are normalized into
/// per-joint distributions.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AWingParams {
    pub omega: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub theta: f64,
}

impl Default for AWingParams {
    fn default() -> Self {
        Self {
            omega: 14.0,
            epsilon: 1.0,
            alpha: 2.1,
            theta: 0.5,
        }
    }
}

impl AWingParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.omega, self.epsilon, self.alpha, self.theta];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("AWing parameters must be positive: {self:?}")));
        }
        if self.alpha <= 2.0 {
            return Err(Error::invalid(format!(
                "AWing alpha must exceed 2 so alpha - y > 1 on [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Slope `A` of the linear piece for ground-truth value `y`.
    pub fn a(&self, y: f64) -> f64 {
        let e = self.alpha - y;
        let r = self.theta / self.epsilon;
        self.omega * (1.0 / (1.0 + r.powf(e))) * e * r.powf(e - 1.0) * (1.0 / self.epsilon)
    }

    /// Offset `C` of the linear piece for ground-truth value `y`.
    pub fn c(&self, y: f64) -> f64 {
        let e = self.alpha - y;
        let r = self.theta / self.epsilon;
        self.theta * self.a(y) - self.omega * (1.0 + r.powf(e)).ln()
    }

    /// Logarithmic piece, used below the threshold.
    pub fn nonlinear(&self, y: f64, diff: f64) -> f64 {
        self.omega * (1.0 + (diff / self.epsilon).powf(self.alpha - y)).ln()
    }

    /// Linear piece, used at and above the threshold.
    pub fn linear(&self, y: f64, diff: f64) -> f64 {
        self.a(y) * diff - self.c(y)
    }

    /// Per-pixel loss for ground truth `y` and prediction `y_hat`.
    pub fn pixel(&self, y: f64, y_hat: f64) -> f64 {
        let d = (y - y_hat).abs();
        if d < self.theta {
            self.nonlinear(y, d)
        } else {
            self.linear(y, d)
        }
    }

    /// Derivative of [`Self::pixel`] with respect to `y_hat`.
    pub fn pixel_grad(&self, y: f64, y_hat: f64) -> f64 {
        let d = (y - y_hat).abs();
        let dir = if y_hat >= y { 1.0 } else { -1.0 };
        let slope = if d < self.theta {
            let e = self.alpha - y;
            let u = d / self.epsilon;
            self.omega * e * u.powf(e - 1.0) / self.epsilon / (1.0 + u.powf(e))
        } else {
            self.a(y)
        };
        dir * slope
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the pose loss; the distillation term gets `1 - alpha_mix`.
    pub alpha_mix: f64,
}

impl LossWeights {
    pub fn new(alpha_mix: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha_mix) {
            return Err(Error::invalid(format!("alpha_mix {alpha_mix} outside [0, 1]")));
        }
        Ok(Self { alpha_mix })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_mix: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseLoss {
    Awing,
    Mse,
}

impl std::str::FromStr for PoseLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awing" => Ok(PoseLoss::Awing),
            "mse" => Ok(PoseLoss::Mse),
            other => Err(Error::invalid(format!("unknown loss {other:?} (awing | mse)"))),
        }
    }
}

pub fn awing_loss(y: &FloatTensor, y_hat: &FloatTensor, p: &AWingParams) -> Result<f64> {
    Ok(awing_loss_with_grad(y, y_hat, p)?.0)
}

/// Mean AWing loss over every pixel and its gradient with respect to `y_hat`.
pub fn awing_loss_with_grad(
    y: &FloatTensor,
    y_hat: &FloatTensor,
    p: &AWingParams,
) -> Result<(f64, FloatTensor)> {
    y.expect_same_shape(y_hat)?;
    p.validate()?;
    let n = y.len() as f64;
    let mut total = 0.0;
    let mut g = Vec::with_capacity(y.len());
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        total += p.pixel(a, b);
        g.push(p.pixel_grad(a, b) / n);
    }
    Ok((total / n, FloatTensor::from_parts(y.shape().to_vec(), g)))
}

pub fn mse_loss(y: &FloatTensor, y_hat: &FloatTensor) -> Result<f64> {
    Ok(mse_loss_with_grad(y, y_hat)?.0)
}

pub fn mse_loss_with_grad(y: &FloatTensor, y_hat: &FloatTensor) -> Result<(f64, FloatTensor)> {
    y.expect_same_shape(y_hat)?;
    let n = y.len() as f64;
    let loss = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    let grad = y.zip_map(y_hat, |a, b| 2.0 * (b - a) / n)?;
    Ok((loss, grad))
}

fn joint_planes(t: &FloatTensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, _, h, w] => Ok((*n, h * w)),
        s => Err(Error::invalid(format!("heatmaps must be (n, k, h, w), got {s:?}"))),
    }
}

pub fn kl_loss(teacher: &FloatTensor, student: &FloatTensor) -> Result<f64> {
    Ok(kl_loss_with_grad(teacher, student)?.0)
}

/// Pixel-level KL divergence `KL(teacher ‖ student)`.
///
/// Each joint map is clamped into `[KL_FLOOR, 1]` and normalized to sum to one;
/// the divergence is summed over joints and pixels and averaged over the
/// batch. The gradient is taken with respect to the raw student values and is
/// zero wherever the clamp is active.
pub fn kl_loss_with_grad(teacher: &FloatTensor, student: &FloatTensor) -> Result<(f64, FloatTensor)> {
    teacher.expect_same_shape(student)?;
    let (n, plane) = joint_planes(student)?;
    let clamp = |v: f64| v.clamp(KL_FLOOR, 1.0);
    let mut total = 0.0;
    let mut grad = vec![0.0; student.len()];
    for ((tp, sp), gp) in teacher
        .data()
        .chunks(plane)
        .zip(student.data().chunks(plane))
        .zip(grad.chunks_mut(plane))
    {
        let t_sum: f64 = tp.iter().map(|&v| clamp(v)).sum();
        let s_sum: f64 = sp.iter().map(|&v| clamp(v)).sum();
        for ((&t, &s), g) in tp.iter().zip(sp).zip(gp.iter_mut()) {
            let p = clamp(t) / t_sum;
            let sc = clamp(s);
            let q = sc / s_sum;
            total += p * (p / q).ln();
            if (KL_FLOOR..=1.0).contains(&s) {
                *g = (-p / sc + 1.0 / s_sum) / n as f64;
            }
        }
    }
    Ok((total / n as f64, FloatTensor::from_parts(student.shape().to_vec(), grad)))
}

/// Value and components of the blended objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pose: f64,
    pub kl: f64,
}

/// `alpha_mix · L_pose(gt, student) + (1 − alpha_mix) · L_KL(teacher, student)`.
///
/// With `alpha_mix == 1` the teacher is not consulted and may be `None`.
pub fn total_loss_with_grad(
    gt: &FloatTensor,
    student: &FloatTensor,
    teacher: Option<&FloatTensor>,
    w: &LossWeights,
    pose: PoseLoss,
    p: &AWingParams,
) -> Result<(LossBreakdown, FloatTensor)> {
    let (pose_v, pose_g) = match pose {
        PoseLoss::Awing => awing_loss_with_grad(gt, student, p)?,
        PoseLoss::Mse => mse_loss_with_grad(gt, student)?,
    };
    let a = w.alpha_mix;
    let mut grad = pose_g.scale(a);
    let mut kl_v = 0.0;
    if a < 1.0 {
        let t = teacher.ok_or_else(|| {
            Error::config("distillation weight is nonzero but no teacher output was given")
        })?;
        let (v, g) = kl_loss_with_grad(t, student)?;
        kl_v = v;
        grad.add_assign(&g.scale(1.0 - a))?;
    }
    Ok((
        LossBreakdown {
            total: a * pose_v + (1.0 - a) * kl_v,
            pose: pose_v,
            kl: kl_v,
        },
        grad,
    ))
}

/// Blended objective with the AWing pose term.
pub fn total_loss(
    gt: &FloatTensor,
    student: &FloatTensor,
    teacher: &FloatTensor,
    w: &LossWeights,
    p: &AWingParams,
) -> Result<f64> {
    Ok(total_loss_with_grad(gt, student, Some(teacher), w, PoseLoss::Awing, p)?.0.total)
}
