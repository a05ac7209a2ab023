//! Deterministic synthetic pose data: coloured stick figures on cluttered
//! backgrounds with five labelled joints (head, both hands, both feet).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{encode_heatmap, synth_falloff, Keypoint, KeypointSet};
use crate::tensor::FloatTensor;

pub const JOINTS: usize = 5;
pub const JOINT_NAMES: [&str; JOINTS] = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Pose variation in [0, 1]; 0 renders the canonical pose every time.
    pub pose_noise: f64,
    /// Random background strokes per image.
    pub clutter: usize,
    /// Amplitude of per-pixel background noise.
    pub pixel_noise: f64,
    /// Limb thickness in pixels.
    pub limb_width: f64,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            pose_noise: 1.0,
            clutter: 4,
            pixel_noise: 0.05,
            limb_width: 2.5,
            seed: 42,
            train_size: 1024,
            val_size: 256,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::config("synthetic images must be at least 32x32"));
        }
        if !(0.0..=1.0).contains(&self.pose_noise) || !(self.pixel_noise >= 0.0) || !(self.limb_width > 0.0) {
            return Err(Error::config("pose_noise in [0, 1], pixel_noise >= 0, limb_width > 0"));
        }
        Ok(())
    }
}

/// One rendered image with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(3, H, W)`, values roughly in [-1, 1].
    pub image: FloatTensor,
    pub keypoints: KeypointSet,
    /// Neck to top of head, in pixels.
    pub head_length: f64,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Val = 1,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    Ok(SynthData {
        train: (0..spec.train_size).map(|i| sample(spec, Split::Train, i)).collect(),
        val: (0..spec.val_size).map(|i| sample(spec, Split::Val, i)).collect(),
    })
}

type Pt = (f64, f64);

struct Pose {
    neck: Pt,
    pelvis: Pt,
    head: Pt,
    head_top: Pt,
    head_r: f64,
    elbows: [Pt; 2],
    hands: [Pt; 2],
    knees: [Pt; 2],
    feet: [Pt; 2],
}

fn pose(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Pose {
    let p = spec.pose_noise;
    let mut u = |scale: f64| if p == 0.0 { 0.0 } else { rng.gen_range(-1.0..1.0) * p * scale };
    let deg = std::f64::consts::PI / 180.0;
    let rot = u(20.0) * deg;
    let scale = (spec.height.min(spec.width) as f64 / 64.0) * (1.0 + u(0.15));
    let center = (
        spec.width as f64 / 2.0 + u(6.0),
        spec.height as f64 * 0.47 + u(4.0),
    );
    // canonical frame: y down, angles measured from straight down
    let (sr, cr) = rot.sin_cos();
    let place = |(x, y): Pt| (center.0 + scale * (cr * x - sr * y), center.1 + scale * (sr * x + cr * y));
    let step = |from: Pt, angle: f64, len: f64| (from.0 + len * angle.sin(), from.1 + len * angle.cos());
    let neck = (0.0, -8.0);
    let pelvis = (0.0, 8.0);
    let mut elbows = [(0.0, 0.0); 2];
    let mut hands = elbows;
    let mut knees = elbows;
    let mut feet = elbows;
    for (i, side) in [1.0, -1.0].into_iter().enumerate() {
        let shoulder = side * (35.0 + u(60.0)) * deg;
        let bend = side * (20.0 + u(60.0)) * deg;
        elbows[i] = step(neck, shoulder, 9.0);
        hands[i] = step(elbows[i], shoulder + bend, 8.0);
        let hip = side * (15.0 + u(25.0)) * deg;
        let knee = side * u(35.0) * deg;
        knees[i] = step(pelvis, hip, 10.0);
        feet[i] = step(knees[i], hip + knee, 10.0);
    }
    Pose {
        neck: place(neck),
        pelvis: place(pelvis),
        head: place((0.0, -14.0)),
        head_top: place((0.0, -19.0)),
        head_r: 4.5 * scale,
        elbows: elbows.map(place),
        hands: hands.map(place),
        knees: knees.map(place),
        feet: feet.map(place),
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, c: [f64; 3]) {
        for (ch, v) in c.iter().enumerate() {
            self.rgb[(ch * self.h + y) * self.w + x] = *v;
        }
    }

    fn segment(&mut self, a: Pt, b: Pt, width: f64, c: [f64; 3]) {
        let r = width / 2.0;
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
        let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(self.w.saturating_sub(1));
        let y1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(self.h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64 - a.0, y as f64 - a.1);
                let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= r * r {
                    self.paint(x, y, c);
                }
            }
        }
    }

    fn disc(&mut self, c0: Pt, r: f64, c: [f64; 3]) {
        self.segment(c0, c0, 2.0 * r, c);
    }
}

const TORSO: [f64; 3] = [0.95, 0.95, 0.9];
const HEAD: [f64; 3] = [1.0, 0.85, 0.2];
const ARMS: [[f64; 3]; 2] = [[0.95, 0.2, 0.15], [0.15, 0.35, 1.0]];
const LEGS: [[f64; 3]; 2] = [[0.2, 0.9, 0.25], [0.85, 0.25, 0.95]];

/// Renders sample `index` of `split`; a pure function of its arguments.
pub fn sample(spec: &SynthSpec, split: Split, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    let (h, w) = (spec.height, spec.width);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.45));
    let tilt = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![0.0; 3 * h * w],
    };
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let g = tilt.0 * (x as f64 / w as f64 - 0.5) + tilt.1 * (y as f64 / h as f64 - 0.5);
                let n = if spec.pixel_noise > 0.0 {
                    rng.gen_range(-1.0..1.0) * spec.pixel_noise
                } else {
                    0.0
                };
                canvas.rgb[(ch * h + y) * w + x] = base[ch] + g + n;
            }
        }
    }
    for _ in 0..spec.clutter {
        let a = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let b = (a.0 + rng.gen_range(-20.0..20.0), a.1 + rng.gen_range(-20.0..20.0));
        let c = std::array::from_fn(|_| rng.gen_range(0.0..0.7));
        canvas.segment(a, b, rng.gen_range(1.0..3.0), c);
    }
    let p = pose(spec, &mut rng);
    let lw = spec.limb_width * (h.min(w) as f64 / 64.0);
    canvas.segment(p.neck, p.pelvis, lw * 1.6, TORSO);
    for i in 0..2 {
        canvas.segment(p.pelvis, p.knees[i], lw, LEGS[i]);
        canvas.segment(p.knees[i], p.feet[i], lw, LEGS[i]);
        canvas.segment(p.neck, p.elbows[i], lw, ARMS[i]);
        canvas.segment(p.elbows[i], p.hands[i], lw, ARMS[i]);
    }
    canvas.disc(p.head, p.head_r, HEAD);

    let inside = |(x, y): Pt| x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    let joints = [p.head, p.hands[0], p.hands[1], p.feet[0], p.feet[1]];
    let points = joints
        .iter()
        .map(|&(x, y)| Keypoint {
            x,
            y,
            visible: inside((x, y)),
        })
        .collect();
    let all = [
        p.head_top, p.neck, p.pelvis, p.elbows[0], p.elbows[1], p.hands[0], p.hands[1], p.knees[0],
        p.knees[1], p.feet[0], p.feet[1],
    ];
    let (xs, ys): (Vec<f64>, Vec<f64>) = all.iter().copied().unzip();
    let span = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
    let scale = (span(&xs).max(1.0) * span(&ys).max(1.0)).sqrt();
    let head_length = ((p.head_top.0 - p.neck.0).powi(2) + (p.head_top.1 - p.neck.1).powi(2)).sqrt();
    let image = FloatTensor::from_parts(
        vec![3, h, w],
        canvas.rgb.iter().map(|v| (v.clamp(0.0, 1.0) - 0.5) * 2.0).collect(),
    );
    Sample {
        image,
        keypoints: KeypointSet {
            points,
            scale,
            falloff: synth_falloff(),
        },
        head_length,
    }
}

/// Shuffled index batches covering `0..len` once; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 || batch_size == 0 {
        return Err(Error::invalid("batching needs a nonempty dataset and batch size"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks images and target heatmaps of the selected samples.
pub fn collate(
    samples: &[Sample],
    idx: &[usize],
    dims: (usize, usize),
    stride: f64,
    sigma: f64,
) -> Result<(FloatTensor, FloatTensor)> {
    let first = samples
        .get(*idx.first().ok_or_else(|| Error::invalid("empty batch"))?)
        .ok_or_else(|| Error::invalid("batch index out of range"))?;
    let ishape = first.image.shape().to_vec();
    let k = first.keypoints.len();
    let mut images = Vec::with_capacity(idx.len() * first.image.len());
    let mut targets = Vec::with_capacity(idx.len() * k * dims.0 * dims.1);
    for &i in idx {
        let s = samples.get(i).ok_or_else(|| Error::invalid("batch index out of range"))?;
        if s.image.shape() != ishape.as_slice() || s.keypoints.len() != k {
            return Err(Error::invalid("samples in a batch must share shapes"));
        }
        images.extend_from_slice(s.image.data());
        targets.extend(encode_heatmap(&s.keypoints.points, dims, stride, sigma).maps.into_data());
    }
    let n = idx.len();
    Ok((
        FloatTensor::from_parts([vec![n], ishape].concat(), images),
        FloatTensor::from_parts(vec![n, k, dims.0, dims.1], targets),
    ))
}
