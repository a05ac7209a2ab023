//! Adam, the step learning-rate schedule, teacher training and the
//! teacher → student distillation loop.

use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use crate::autograd::{Layer, Param, ParamKind, Pass, LATENT_CLAMP};
use crate::error::{Error, Result};
use crate::eval::{pck_of, predict_samples, DEFAULT_SIGMA};
use crate::losses::{total_loss_with_grad, AWingParams, LossBreakdown, LossWeights, PoseLoss};
use crate::model::{read_model, write_model, Network, NetworkConfig};
use crate::synthdata::{batches, collate, Sample, SynthData, SynthSpec};
use crate::tensor::FloatTensor;

/// Adaptive-moment optimizer state, one moment pair per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Self::default()
        }
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Binary latent weights are clamped to `±LATENT_CLAMP` afterwards.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.is_trainable()).collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if p.value.len() != m.len() || p.grad.len() != m.len() || v.len() != m.len() {
                return Err(Error::invalid(format!("{}: shape changed under the optimizer", p.name)));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let clamp = p.kind == ParamKind::BinaryWeight;
            let grad = p.grad.data().to_vec();
            let value = p.value_mut().data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= lr * mh / (vh.sqrt() + self.eps);
                if clamp {
                    value[i] = value[i].clamp(-LATENT_CLAMP, LATENT_CLAMP);
                }
            }
        }
        Ok(())
    }
}

/// Step schedule: `base_lr`, divided by 10 at each milestone, ending at `epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub epochs: usize,
}

impl Schedule {
    /// 210 epochs, decays at 170 and 200.
    pub fn full() -> Self {
        Self {
            base_lr: 1e-3,
            milestones: vec![170, 200],
            epochs: 210,
        }
    }

    /// 20 epochs, decays at 12 and 16.
    pub fn compressed() -> Self {
        Self {
            base_lr: 1e-3,
            milestones: vec![12, 16],
            epochs: 20,
        }
    }

    /// 12 epochs from 5e-3, decays at 7 and 10. Sized for single-core runs
    /// on the synthetic task.
    pub fn desk() -> Self {
        Self {
            base_lr: 5e-3,
            ..Self::compressed().rescaled(12)
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "compressed" => Ok(Self::compressed()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::config(format!("unknown schedule {name:?} (full, compressed, desk)"))),
        }
    }

    /// Same milestones as fractions of a different epoch budget.
    pub fn rescaled(&self, epochs: usize) -> Self {
        Self {
            base_lr: self.base_lr,
            milestones: self
                .milestones
                .iter()
                .map(|&m| ((m * epochs) as f64 / self.epochs as f64).round() as usize)
                .collect(),
            epochs,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::TrainingComplete(epoch));
        }
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count() as i32;
        Ok(self.base_lr * 10f64.powi(-decays))
    }
}

/// Run settings shared by teacher training and distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub loss: PoseLoss,
    pub weights: LossWeights,
    pub awing: AWingParams,
    pub seed: u64,
    /// Batches prepared ahead of the training step.
    pub prefetch: usize,
    /// Teacher training stops after this many epochs without a better
    /// validation PCK.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::compressed(),
            batch_size: 16,
            loss: PoseLoss::Awing,
            weights: LossWeights::default(),
            awing: AWingParams::default(),
            seed: 0,
            prefetch: 2,
            patience: None,
        }
    }
}

/// Everything a training command needs: model, data and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: NetworkConfig,
    #[serde(default)]
    pub data: SynthSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Desk-scale student on the default synthetic task.
    pub fn desk() -> Self {
        Self {
            model: NetworkConfig::desk(),
            data: SynthSpec::default(),
            train: TrainConfig {
                schedule: Schedule::desk(),
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if (self.model.input_h, self.model.input_w) != (self.data.height, self.data.width) {
            return Err(Error::config(format!(
                "model input {}x{} does not match data {}x{}",
                self.model.input_h, self.model.input_w, self.data.height, self.data.width
            )));
        }
        if self.model.joints != crate::synthdata::JOINTS || self.model.in_channels != 3 {
            return Err(Error::config(format!(
                "synthetic data has {} joints and 3 channels",
                crate::synthdata::JOINTS
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.schedule.epochs == 0 || !(t.schedule.base_lr > 0.0) {
            return Err(Error::config("batch_size, epochs and base_lr must be positive"));
        }
        LossWeights::new(t.weights.alpha_mix)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Progress of a run, checkpointed alongside the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            epoch: 0,
            lr: cfg.schedule.lr_at(0)?,
            schedule: cfg.schedule.clone(),
            weights: cfg.weights,
            seed: cfg.seed,
            adam: Adam::new(),
        })
    }
}

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pose: f64,
    pub kl: f64,
    pub val_pck: Option<f64>,
}

/// Streams collated batches through a bounded FIFO queue so preparation can
/// run ahead of `step` by at most `capacity` batches.
fn for_each_batch(
    samples: &[Sample],
    order: &[Vec<usize>],
    dims: (usize, usize),
    stride: f64,
    capacity: usize,
    mut step: impl FnMut(FloatTensor, FloatTensor) -> Result<()>,
) -> Result<()> {
    if capacity == 0 {
        for idx in order {
            let (x, y) = collate(samples, idx, dims, stride, DEFAULT_SIGMA)?;
            step(x, y)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel(capacity);
        scope.spawn(move || {
            for idx in order {
                if tx.send(collate(samples, idx, dims, stride, DEFAULT_SIGMA)).is_err() {
                    break;
                }
            }
        });
        for item in rx {
            let (x, y) = item?;
            step(x, y)?;
        }
        Ok(())
    })
}

fn check_compatible(student: &Network, teacher: &Network) -> Result<()> {
    let (s, t) = (student.config(), teacher.config());
    if (s.joints, s.input_h, s.input_w, s.in_channels) != (t.joints, t.input_h, t.input_w, t.in_channels) {
        return Err(Error::config(format!(
            "teacher emits {}x{}x{} heatmaps from {}x{} input, student {}x{}x{} from {}x{}",
            t.joints,
            t.input_h / 4,
            t.input_w / 4,
            t.input_h,
            t.input_w,
            s.joints,
            s.input_h / 4,
            s.input_w / 4,
            s.input_h,
            s.input_w
        )));
    }
    Ok(())
}

/// One pass over `samples`. The teacher, when present and needed, runs in
/// inference mode and is never updated. Returns mean loss components.
pub fn distill_epoch(
    student: &mut Network,
    mut teacher: Option<&mut Network>,
    samples: &[Sample],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if let Some(t) = teacher.as_deref() {
        check_compatible(student, t)?;
    }
    state.lr = state.schedule.lr_at(state.epoch)?;
    let dims = student.config().heatmap_dims();
    let stride = student.config().input_h as f64 / dims.0 as f64;
    let order = batches(samples.len(), cfg.batch_size, state.seed.wrapping_add(state.epoch as u64))?;
    let mut sum = LossBreakdown::default();
    let mut count = 0usize;
    let need_teacher = state.weights.alpha_mix < 1.0;
    for_each_batch(samples, &order, dims, stride, cfg.prefetch, |x, y| {
        let t_out = match (&mut teacher, need_teacher) {
            (Some(t), true) => Some(t.forward(&x, Pass::EVAL)?),
            (None, true) => return Err(Error::config("distillation needs a teacher")),
            _ => None,
        };
        let out = student.forward(&x, Pass::TRAIN)?;
        let (parts, grad) =
            total_loss_with_grad(&y, &out, t_out.as_ref(), &state.weights, cfg.loss, &cfg.awing)?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became {} at epoch {}",
                parts.total, state.epoch
            )));
        }
        student.params_mut().into_iter().for_each(Param::zero_grad);
        student.backward(&grad)?;
        state.adam.step(student.params_mut(), state.lr)?;
        let n = x.shape()[0];
        sum.total += parts.total * n as f64;
        sum.pose += parts.pose * n as f64;
        sum.kl += parts.kl * n as f64;
        count += n;
        Ok(())
    })?;
    state.epoch += 1;
    let c = count as f64;
    Ok(LossBreakdown {
        total: sum.total / c,
        pose: sum.pose / c,
        kl: sum.kl / c,
    })
}

/// Validation PCK@0.5 of `net`.
pub fn val_pck(net: &mut Network, val: &[Sample]) -> Result<f64> {
    let preds = predict_samples(net, val, 32)?;
    pck_of(&preds, val, 0.5)
}

/// Outcome of a training run.
pub struct TrainOutcome {
    pub model: Network,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

fn snapshot(net: &Network) -> Result<Vec<u8>> {
    write_model(net, &[])
}

fn run(
    config: &NetworkConfig,
    mut teacher: Option<&mut Network>,
    data: &SynthData,
    cfg: &TrainConfig,
    keep_best: bool,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut net = Network::build(config, cfg.seed)?;
    let mut state = TrainState::new(cfg)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut stale = 0;
    while state.epoch < state.schedule.epochs {
        let epoch = state.epoch;
        let parts = distill_epoch(&mut net, teacher.as_deref_mut(), &data.train, &mut state, cfg)?;
        let val = if data.val.is_empty() {
            None
        } else {
            Some(val_pck(&mut net, &data.val)?)
        };
        let rec = EpochRecord {
            epoch,
            lr: state.lr,
            loss: parts.total,
            pose: parts.pose,
            kl: parts.kl,
            val_pck: val,
        };
        log(&rec);
        history.push(rec);
        if keep_best {
            if let Some(v) = val {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, snapshot(&net)?));
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience.is_some_and(|p| stale >= p) {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, bytes)) = best {
        net = read_model(&bytes)?.network;
    }
    Ok(TrainOutcome {
        model: net,
        history,
        state,
    })
}

/// Trains a real-valued teacher with pose supervision only and returns the
/// snapshot with the best validation PCK.
pub fn train_teacher(
    config: &NetworkConfig,
    data: &SynthData,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if config.binarize {
        return Err(Error::config("the teacher must be real-valued (binarize = false)"));
    }
    let cfg = TrainConfig {
        weights: LossWeights { alpha_mix: 1.0 },
        ..cfg.clone()
    };
    run(config, None, data, &cfg, true, log)
}

/// Trains a student from scratch against a frozen teacher for the full
/// schedule. With `alpha_mix == 1` the teacher is ignored.
pub fn distill(
    teacher: Option<&mut Network>,
    config: &NetworkConfig,
    data: &SynthData,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    run(config, teacher, data, cfg, false, log)
}

/// Model file with the training state stored as a `train_state` record.
pub fn checkpoint_bytes(net: &Network, state: &TrainState) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(state).map_err(|e| Error::Format(e.to_string()))?;
    write_model(net, &[("train_state", &json)])
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Network, Option<TrainState>)> {
    let file = read_model(bytes)?;
    let state = file
        .blobs
        .iter()
        .find(|(n, _)| n == "train_state")
        .map(|(_, b)| serde_json::from_slice(b).map_err(|e| Error::Format(format!("train state: {e}"))))
        .transpose()?;
    Ok((file.network, state))
}
