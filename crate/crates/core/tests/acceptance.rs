//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 to 8 train networks on the synthetic task and take about an
//! hour on one core. Set `BIPOSE_ACCEPTANCE_SKIP_TRAINING=1` to report them as
//! skipped during development.

#[path = "common/gradcheck.rs"]
mod gradcheck;

use std::io::Write;
use std::time::{Duration, Instant};

use bipose_core::autograd::{BatchNorm2d, Conv2d, Layer, Linear, PRelu, Param, ParamKind, Pass};
use bipose_core::bitpack::{compute_scale, sign_quantize};
use bipose_core::blocks::{
    channel_shuffle, channel_unshuffle, shuffle_permutation, BasicBlock, BinaryUnit, BlockKind, FusionLayer,
    IrBottleneck, MsBlock, Resampler, SqueezeExcite,
};
use bipose_core::error::Result;
use bipose_core::eval::{decode_heatmap, Heatmap};
use bipose_core::kernels::bench::run_shape;
use bipose_core::kernels::{binary_conv2d, ConvMode, ConvSpec};
use bipose_core::losses::{AWingParams, LossWeights, PoseLoss};
use bipose_core::model::{pruned_stages, read_model, record_sizes, unpruned_stages, write_model, Network, NetworkConfig};
use bipose_core::synthdata::{generate, SynthData, SynthSpec};
use bipose_core::tensor::FloatTensor;
use bipose_core::train::{self, val_pck, Schedule, TrainConfig};
use gradcheck::{check, freeze_scales, FusionTarget, GradTarget, LayerTarget};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64) -> FloatTensor {
    let mut r = rng(seed);
    FloatTensor::from_fn(shape, |_| r.gen_range(-1.5..1.5))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 1

fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Nested-loop convolution of sign tensors with a +1 border, scaled by the
/// per-filter mean absolute latent weight.
fn naive_binary_conv(a: &FloatTensor, w: &FloatTensor, k: usize, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let (c_in, h, wd) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let c_out = w.shape()[0];
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let filt = &w.data()[o * c_in * k * k..(o + 1) * c_in * k * k];
        let alpha = filt.iter().map(|v| v.abs()).sum::<f64>() / (k * k * c_in) as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let act = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                1.0
                            } else {
                                sgn(a.data()[(c * h + iy as usize) * wd + ix as usize])
                            };
                            acc += act * sgn(filt[(c * k + ky) * k + kx]);
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = alpha * acc;
            }
        }
    }
    (vec![c_out, oh, ow], out)
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut r = rng(1);
    let cases = 1200;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..cases {
        let c_in = r.gen_range(1..=16);
        let c_out = r.gen_range(1..=8);
        let k = if r.gen_bool(0.5) { 1 } else { 3 };
        let stride = r.gen_range(1..=2);
        let (h, w) = (r.gen_range(1..=9), r.gen_range(1..=9));
        // a tenth of the entries are exact zeros, which binarize to +1
        let mut draw = |shape: &[usize]| {
            FloatTensor::from_fn(shape, |_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(-1.0..1.0) })
        };
        let a = draw(&[c_in, h, w]);
        let wt = draw(&[c_out, c_in, k, k]);
        let spec = ConvSpec::new(c_in, c_out, k, stride, ConvMode::Binary);
        let got = binary_conv2d(
            &sign_quantize(&a)?,
            &sign_quantize(&wt)?,
            &compute_scale(&wt, k, c_in)?,
            &spec,
        )?;
        let (shape, expect) = naive_binary_conv(&a, &wt, k, stride);
        if got.shape() != shape.as_slice() {
            failures += 1;
            continue;
        }
        for (&g, &e) in got.data().iter().zip(&expect) {
            let scale = g.abs().max(e.abs());
            let rel = if scale == 0.0 { 0.0 } else { (g - e).abs() / scale };
            worst = worst.max(rel);
            if rel > 1e-6 {
                failures += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::new(
        failures == 0 && secs < 60.0,
        format!("{cases} cases, worst relative error {worst:.1e}, {failures} mismatches, {secs:.1} s"),
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Squeeze-excite weights exposed through the single-input layer interface.
struct SeLayer(SqueezeExcite);

impl Layer for SeLayer {
    fn forward(&mut self, x: &FloatTensor, pass: Pass) -> Result<FloatTensor> {
        self.0.forward(x, pass)
    }

    fn backward(&mut self, grad: &FloatTensor) -> Result<FloatTensor> {
        self.0.backward(grad)
    }

    fn params(&self) -> Vec<&Param> {
        self.0.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.0.params_mut()
    }
}

fn layer_target<L: Layer + 'static>(layer: L, shape: &[usize], seed: u64) -> Box<dyn GradTarget> {
    Box::new(LayerTarget::new(layer, rand_tensor(shape, seed + 1000), seed))
}

fn criterion_2() -> Result<Outcome> {
    let bin = ConvMode::Binary;
    let real = ConvMode::Real;
    let mut bn = BatchNorm2d::new("bn", 4);
    bn.gamma.value = rand_tensor(&[4], 3);
    let fusion = |outputs: usize, seed: u64| -> Result<Box<dyn GradTarget>> {
        let mut f = FusionLayer::new("fusion", &[2, 4, 8], outputs, &mut rng(seed))?;
        freeze_scales(f.params_mut());
        let xs = vec![
            rand_tensor(&[2, 2, 8, 8], seed + 1),
            rand_tensor(&[2, 4, 4, 4], seed + 2),
            rand_tensor(&[2, 8, 2, 2], seed + 3),
        ];
        Ok(Box::new(FusionTarget::new(f, xs, seed)))
    };
    let targets: Vec<(&str, Box<dyn GradTarget>)> = vec![
        (
            "conv binary 3x3",
            layer_target(Conv2d::new("c", ConvSpec::new(3, 4, 3, 1, bin), &mut rng(1))?, &[2, 3, 5, 4], 1),
        ),
        (
            "conv binary 3x3/2",
            layer_target(Conv2d::new("c", ConvSpec::new(3, 4, 3, 2, bin), &mut rng(2))?, &[2, 3, 5, 4], 2),
        ),
        (
            "conv binary 1x1",
            layer_target(Conv2d::new("c", ConvSpec::new(3, 4, 1, 1, bin), &mut rng(3))?, &[2, 3, 5, 4], 3),
        ),
        (
            "conv real 3x3",
            layer_target(Conv2d::new("c", ConvSpec::new(3, 4, 3, 1, real), &mut rng(4))?, &[2, 3, 5, 4], 4),
        ),
        ("batchnorm", layer_target(bn, &[2, 4, 3, 3], 5)),
        ("prelu", layer_target(PRelu::new("p", 4, 0.25), &[2, 4, 3, 3], 6)),
        ("linear", layer_target(Linear::new("fc", 10, 3, &mut rng(7)), &[2, 10], 7)),
        (
            "squeeze-excite",
            layer_target(SeLayer(SqueezeExcite::new("se", 8, 12, &mut rng(8))), &[2, 8, 3, 3], 8),
        ),
        (
            "binary unit (residual)",
            layer_target(BinaryUnit::new("u", ConvSpec::new(4, 4, 3, 1, bin), true, &mut rng(9))?, &[2, 4, 4, 4], 9),
        ),
        (
            "binary unit (plain)",
            layer_target(BinaryUnit::new("u", ConvSpec::new(4, 6, 3, 2, bin), false, &mut rng(10))?, &[2, 4, 4, 4], 10),
        ),
        (
            "ir-bottleneck",
            layer_target(IrBottleneck::new("ir", 8, 2, bin, true, &mut rng(11))?, &[2, 8, 4, 4], 11),
        ),
        ("ms-block", layer_target(MsBlock::new("ms", 8, bin, &mut rng(12))?, &[2, 8, 4, 4], 12)),
        ("basic block", layer_target(BasicBlock::new("bb", 4, bin, &mut rng(13))?, &[2, 4, 4, 4], 13)),
        ("upsampler", layer_target(Resampler::up("up", 4, 2, 2, &mut rng(14))?, &[2, 4, 2, 2], 14)),
        ("downsampler", layer_target(Resampler::down("down", 2, 8, 2, &mut rng(15))?, &[2, 2, 8, 8], 15)),
        ("fusion 3->3", fusion(3, 16)?),
        ("fusion 3->1", fusion(1, 17)?),
    ];
    let total = targets.len();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, (name, mut t)) in targets.into_iter().enumerate() {
        let report = check(t.as_mut(), Pass::SURROGATE, 5, 1e-3, 100 + i as u64)?;
        worst = worst.max(report.worst_rel);
        checked += report.checked;
        if !report.passed() || report.checked < 5 {
            failed.push(name);
        }
    }
    Ok(Outcome::new(
        failed.is_empty(),
        format!(
            "{total} layers and blocks, {checked} entries, worst relative error {worst:.1e}{}",
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(", "))
            }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let (omega, eps, alpha, theta) = (14.0f64, 1.0f64, 2.1f64, 0.5f64);
    let lib = AWingParams::default();
    let mut worst_gap = 0.0f64;
    let mut worst_const = 0.0f64;
    for y in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let e = alpha - y;
        let r = theta / eps;
        let a = omega * (1.0 / (1.0 + r.powf(e))) * e * r.powf(e - 1.0) / eps;
        let c = theta * a - omega * (1.0 + r.powf(e)).ln();
        let log_branch = omega * (1.0 + (theta / eps).powf(e)).ln();
        let lin_branch = a * theta - c;
        worst_gap = worst_gap
            .max((log_branch - lin_branch).abs())
            .max((lib.nonlinear(y, theta) - lib.linear(y, theta)).abs());
        worst_const = worst_const
            .max((lib.a(y) - a).abs() / a.abs())
            .max((lib.c(y) - c).abs() / c.abs().max(1e-300));
    }
    Outcome::new(
        worst_gap <= 1e-9 && worst_const <= 1e-12,
        format!("largest branch gap at |y - y_hat| = theta {worst_gap:.1e}, constants agree to {worst_const:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn shuffle_source(n: usize, o: usize) -> usize {
    let g = o / 4;
    match o % 4 {
        0 => 2 * g,
        1 => 2 * g + 1,
        2 => n / 2 + g,
        _ => 3 * n / 4 + g,
    }
}

fn criterion_4() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (prop::sample::select(vec![8usize, 16, 32, 64]), 1usize..3, 1usize..4, any::<u64>());
    let result = runner.run(&strategy, |(n, batch, side, seed)| {
        let perm = shuffle_permutation(n).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for (o, &src) in perm.iter().enumerate() {
            prop_assert_eq!(src, shuffle_source(n, o));
        }
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());

        let x = rand_tensor(&[batch, n, side, side], seed);
        let y = channel_shuffle(&x).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let plane = side * side;
        for s in 0..batch {
            for o in 0..n {
                let src = shuffle_source(n, o);
                prop_assert_eq!(
                    &y.sample(s)[o * plane..(o + 1) * plane],
                    &x.sample(s)[src * plane..(src + 1) * plane]
                );
            }
        }
        let back = channel_unshuffle(&y).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(back, x);
        Ok(())
    });
    match result {
        Ok(()) => Outcome::new(true, "256 cases over n in {8, 16, 32, 64}: pattern, bijection and inverse hold"),
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, base) in [("desk", NetworkConfig::desk()), ("full", NetworkConfig::full())] {
        let count = |stages: Vec<Vec<usize>>| -> Result<usize> {
            let cfg = NetworkConfig { stages, ..base.clone() };
            Ok(Network::build(&cfg, 0)?.cost_report().params)
        };
        let pruned = count(pruned_stages())?;
        let full = count(unpruned_stages())?;
        let saving = 1.0 - pruned as f64 / full as f64;
        pass &= saving >= 0.10;
        parts.push(format!("{name} {full} -> {pruned} ({:.1}% fewer)", 100.0 * saving));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

// ---------------------------------------------------------------- criteria 6-8

fn train_config(seed: u64, loss: PoseLoss, alpha_mix: f64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        schedule: Schedule::desk(),
        batch_size: 8,
        loss,
        weights: LossWeights::new(alpha_mix)?,
        seed,
        ..TrainConfig::default()
    })
}

struct Training {
    teacher: Network,
    teacher_data: SynthData,
    student_data: SynthData,
    teacher_secs: f64,
}

impl Training {
    fn new() -> Result<Self> {
        let start = Instant::now();
        let teacher_data = generate(&SynthSpec {
            train_size: 2048,
            ..SynthSpec::default()
        })?;
        let student_data = generate(&SynthSpec::default())?;
        let outcome = train::train_teacher(
            &NetworkConfig::desk().teacher(),
            &teacher_data,
            &train_config(0, PoseLoss::Awing, 1.0)?,
            &mut |_| {},
        )?;
        Ok(Self {
            teacher: outcome.model,
            teacher_data,
            student_data,
            teacher_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains a student and returns its validation PCK and final-epoch
    /// pose and KL terms.
    fn student(&mut self, block: BlockKind, seed: u64, loss: PoseLoss, alpha_mix: f64) -> Result<(f64, f64, f64)> {
        let start = Instant::now();
        let config = NetworkConfig {
            block,
            ..NetworkConfig::desk()
        };
        let teacher = (alpha_mix < 1.0).then_some(&mut self.teacher);
        let mut out = train::distill(teacher, &config, &self.student_data, &train_config(seed, loss, alpha_mix)?, &mut |_| {})?;
        let pck = val_pck(&mut out.model, &self.student_data.val)?;
        let last = out.history.last().map_or((f64::NAN, f64::NAN), |r| (r.pose, r.kl));
        eprintln!(
            "  student {block:?} seed {seed} {loss:?} alpha_mix {alpha_mix}: PCK {pck:.4} ({:.0} s)",
            start.elapsed().as_secs_f64()
        );
        Ok((pck, last.0, last.1))
    }
}

fn criterion_6(t: &mut Training) -> Result<Outcome> {
    let start = Instant::now();
    let teacher_pck = val_pck(&mut t.teacher, &t.teacher_data.val)?;
    let (student_pck, _, _) = t.student(BlockKind::Ms, 0, PoseLoss::Mse, 1.0)?;
    let minutes = (t.teacher_secs + start.elapsed().as_secs_f64()) / 60.0;
    Ok(Outcome::new(
        teacher_pck >= 0.95 && student_pck < teacher_pck && minutes < 30.0,
        format!("teacher PCK {teacher_pck:.4}, binary MSE student PCK {student_pck:.4}, {minutes:.1} min"),
    ))
}

struct Ablation {
    awing_kd: Vec<f64>,
    mse_kd: Vec<f64>,
    awing_only: Vec<f64>,
}

fn criterion_7(t: &mut Training) -> Result<(Outcome, Ablation)> {
    let start = Instant::now();
    let mut ab = Ablation {
        awing_kd: Vec::new(),
        mse_kd: Vec::new(),
        awing_only: Vec::new(),
    };
    let mut magnitudes = (0.0, 0.0);
    for seed in SEEDS {
        ab.awing_kd.push(t.student(BlockKind::Ms, seed, PoseLoss::Awing, 0.5)?.0);
        let (pck, pose, kl) = t.student(BlockKind::Ms, seed, PoseLoss::Mse, 0.5)?;
        ab.mse_kd.push(pck);
        magnitudes = (magnitudes.0 + pose / SEEDS.len() as f64, magnitudes.1 + kl / SEEDS.len() as f64);
        ab.awing_only.push(t.student(BlockKind::Ms, seed, PoseLoss::Awing, 1.0)?.0);
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let tie = 0.005;
    let per_seed_ok = (0..SEEDS.len())
        .all(|i| ab.awing_kd[i] >= ab.mse_kd[i] - tie && ab.awing_kd[i] >= ab.awing_only[i] - tie);
    let (ak, mk, ao) = (mean(&ab.awing_kd), mean(&ab.mse_kd), mean(&ab.awing_only));
    let pass = ak >= mk && ak >= ao && per_seed_ok && minutes < 120.0;
    let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "mean PCK AWing+KD {ak:.4} [{}], MSE+KD {mk:.4} [{}], AWing-only {ao:.4} [{}]; \
         per-seed within 0.005: {per_seed_ok}; MSE+KD final terms MSE {:.4} < KL {:.4}; {minutes:.1} min",
        fmt(&ab.awing_kd),
        fmt(&ab.mse_kd),
        fmt(&ab.awing_only),
        magnitudes.0,
        magnitudes.1,
    );
    Ok((Outcome::new(pass, detail), ab))
}

fn criterion_8(t: &mut Training, ab: &Ablation) -> Result<Outcome> {
    let mut basic = Vec::new();
    for seed in SEEDS {
        basic.push(t.student(BlockKind::Basic, seed, PoseLoss::Awing, 1.0)?.0);
    }
    let (ms, bb) = (mean(&ab.awing_only), mean(&basic));
    Ok(Outcome::new(
        ms - bb >= 0.01,
        format!(
            "AWing-only students over seeds 0-2: MS-Block mean PCK {ms:.4}, basic block {bb:.4}, difference {:+.4}",
            ms - bb
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(kernel_ok: bool) -> Result<Outcome> {
    let row = run_shape("64x64x3x32x32".parse()?, 0, Duration::from_millis(500))?;
    let speedup = row.speedup();
    Ok(Outcome::new(
        kernel_ok && row.outputs_match && speedup >= 8.0,
        format!(
            "64x64 3x3 at 32x32: binary {:.2} ms, float {:.2} ms, speedup {speedup:.1}x, outputs match {}, criterion 1 {}",
            row.binary_ns / 1e6,
            row.float_ns / 1e6,
            row.outputs_match,
            if kernel_ok { "passed" } else { "failed" }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 10

#[derive(Default)]
struct Tally {
    bops: u64,
    flops: u64,
}

impl Tally {
    /// Same-padded convolution at `h × w`; returns the output extent.
    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, binary: bool, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let macs = (k * k * c_in * c_out * oh * ow) as u64;
        if binary {
            self.bops += macs;
            self.flops += (c_out * oh * ow) as u64;
        } else {
            self.flops += macs;
        }
        (oh, ow)
    }

    fn linear(&mut self, fin: usize, fout: usize) {
        self.flops += (fin * fout) as u64;
    }
}

fn hand_count(cfg: &NetworkConfig) -> Tally {
    let mut t = Tally::default();
    let bin = cfg.binarize;
    let (h, w) = t.conv(cfg.in_channels, cfg.stem_width(), 3, 2, false, cfg.input_h, cfg.input_w);
    let (h, w) = t.conv(cfg.stem_width(), cfg.stem_width(), 3, 2, false, h, w);
    let mid = cfg.mid_width();
    let mut c = cfg.stem_width();
    for _ in 0..cfg.stages[0][0] {
        t.conv(c, mid, 1, 1, bin, h, w);
        t.conv(mid, mid, 3, 1, bin, h, w);
        t.conv(mid, 4 * mid, 1, 1, bin, h, w);
        if cfg.se {
            let hidden = (c / 4).max(1);
            t.linear(c, hidden);
            t.linear(hidden, 4 * mid);
        }
        if c != 4 * mid {
            t.conv(c, 4 * mid, 1, 1, false, h, w);
        }
        c = 4 * mid;
    }
    let res = |i: usize| (h >> i, w >> i);
    let mut widths = vec![c];
    for (si, counts) in cfg.stages.iter().enumerate().skip(1) {
        let nb = counts.len();
        for (i, &blocks) in counts.iter().enumerate() {
            let target = cfg.width(i);
            let (bh, bw) = res(i);
            if i < widths.len() {
                if widths[i] != target {
                    t.conv(widths[i], target, 3, 1, false, bh, bw);
                }
            } else {
                let (ph, pw) = res(i - 1);
                t.conv(widths[widths.len() - 1], target, 3, 2, false, ph, pw);
            }
            for _ in 0..blocks {
                match cfg.block {
                    BlockKind::Ms => {
                        for (share, depth) in [(target / 2, 3), (target / 4, 2), (target / 4, 1)] {
                            for _ in 0..depth {
                                t.conv(share, share, 3, 1, bin, bh, bw);
                            }
                        }
                    }
                    BlockKind::Basic => {
                        t.conv(target, target, 3, 1, bin, bh, bw);
                        t.conv(target, target, 3, 1, bin, bh, bw);
                    }
                }
            }
        }
        widths = (0..nb).map(|i| cfg.width(i)).collect();
        let outputs = if si + 1 == cfg.stages.len() { 1 } else { nb };
        for j in 0..outputs {
            for i in 0..nb {
                let (ih, iw) = res(i);
                if i > j {
                    t.conv(widths[i], widths[j], 1, 1, false, ih, iw);
                } else if i < j {
                    let (mut rh, mut rw) = (ih, iw);
                    for _ in 0..j - i - 1 {
                        (rh, rw) = t.conv(widths[i], widths[i], 3, 2, false, rh, rw);
                    }
                    t.conv(widths[i], widths[j], 3, 2, false, rh, rw);
                }
            }
        }
        widths.truncate(outputs);
    }
    t.conv(widths[0], cfg.joints, 1, 1, false, h, w);
    t.flops += (cfg.joints * h * w) as u64;
    t
}

fn criterion_10() -> Result<Outcome> {
    let configs = [
        ("desk binary MS pruned", NetworkConfig::desk()),
        ("full 256x192", NetworkConfig::full()),
        (
            "desk real basic unpruned without SE",
            NetworkConfig {
                stages: unpruned_stages(),
                block: BlockKind::Basic,
                binarize: false,
                se: false,
                ..NetworkConfig::desk()
            },
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg) in configs {
        let report = Network::build(&cfg, 0)?.cost_report().ops;
        let hand = hand_count(&cfg);
        let ops_exact = report.ops() == hand.flops as f64 + hand.bops as f64 / 64.0;
        let ok = report.bops == hand.bops && report.flops == hand.flops && ops_exact;
        pass &= ok;
        parts.push(format!(
            "{name}: BOPs {} FLOPs {} OPs {:.4e} ({})",
            report.bops,
            report.flops,
            report.ops(),
            if ok {
                "matches hand count".to_string()
            } else {
                format!("hand count BOPs {} FLOPs {}", hand.bops, hand.flops)
            }
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

// ---------------------------------------------------------------- criterion 11

fn criterion_11() -> Result<Outcome> {
    let cfg = NetworkConfig::desk();
    let mut net = Network::build(&cfg, 5)?;
    // move every real parameter and buffer off its initial value
    let mut r = rng(6);
    for p in net.params_mut() {
        if p.kind == ParamKind::BinaryWeight {
            continue;
        }
        let positive = p.name.ends_with("running_var");
        for v in p.value_mut().data_mut() {
            *v = if positive {
                r.gen_range(0.5..2.0)
            } else {
                *v + r.gen_range(-0.3..0.3)
            };
        }
    }
    let bytes = write_model(&net, &[])?;
    let mut loaded = read_model(&bytes)?.network;
    let mut identical = true;
    for i in 0..100 {
        let x = rand_tensor(&[1, 3, cfg.input_h, cfg.input_w], 10_000 + i);
        let a = net.predict(&x)?;
        let b = loaded.predict(&x)?;
        identical &= a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    }
    let binary: Vec<(String, usize, usize)> = net
        .params()
        .into_iter()
        .filter(|p| p.kind == ParamKind::BinaryWeight)
        .map(|p| (p.name.clone(), p.value.len(), p.value.shape()[0]))
        .collect();
    let records = record_sizes(&bytes)?;
    let mut over = Vec::new();
    let mut worst_slack = usize::MAX;
    for (name, n, c_out) in &binary {
        let budget = n.div_ceil(8) + 8 * c_out + 64;
        match records.iter().find(|rec| &rec.name == name) {
            Some(rec) if rec.bytes <= budget => worst_slack = worst_slack.min(budget - rec.bytes),
            _ => over.push(name.as_str()),
        }
    }
    Ok(Outcome::new(
        identical && over.is_empty() && !binary.is_empty(),
        format!(
            "100 inputs bit-identical: {identical}; {} binary records within weights/8 + 8 bytes per alpha + 64, \
             smallest slack {worst_slack} bytes{}",
            binary.len() - over.len(),
            if over.is_empty() {
                String::new()
            } else {
                format!(", over budget: {}", over.join(", "))
            }
        ),
    ))
}

// ---------------------------------------------------------------- criterion 12

fn criterion_12() -> Result<Outcome> {
    let stride = 4.0;
    // peak at (row 2, col 2) of a 5×5 map
    let cases: [(&str, [(usize, usize, f64); 2], (f64, f64)); 5] = [
        ("right", [(2, 3, 0.6), (2, 1, 0.3)], (2.25, 2.0)),
        ("left", [(2, 1, 0.6), (2, 3, 0.3)], (1.75, 2.0)),
        ("down", [(3, 2, 0.6), (1, 2, 0.3)], (2.0, 2.25)),
        ("up", [(1, 2, 0.6), (3, 2, 0.3)], (2.0, 1.75)),
        ("tie", [(2, 1, 0.5), (2, 3, 0.5)], (2.0, 2.0)),
    ];
    let mut failed = Vec::new();
    for (name, neighbours, (cx, cy)) in cases {
        let mut maps = FloatTensor::zeros(&[1, 5, 5]);
        maps.data_mut()[2 * 5 + 2] = 1.0;
        for (r, c, v) in neighbours {
            maps.data_mut()[r * 5 + c] = v;
        }
        if name == "tie" {
            maps.data_mut()[5 + 2] = 0.4;
            maps.data_mut()[3 * 5 + 2] = 0.4;
        }
        let det = decode_heatmap(&Heatmap::new(maps, stride, 2.0)?);
        let ok = matches!(det.as_slice(), [Some(d)] if d.x == cx * stride && d.y == cy * stride && d.score == 1.0);
        if !ok {
            failed.push(name);
        }
    }
    Ok(Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            "right/left/down/up shift by exactly +-0.25 cell, symmetric ties stay on the peak".to_string()
        } else {
            format!("wrong offsets for: {}", failed.join(", "))
        },
    ))
}

// ---------------------------------------------------------------- runner

fn errored(e: &bipose_core::Error) -> Outcome {
    Outcome::new(false, format!("error: {e}"))
}

fn report(n: usize, title: &str, outcome: Result<Outcome>, failures: &mut usize) -> bool {
    let outcome = outcome.unwrap_or_else(|e| errored(&e));
    if !outcome.pass {
        *failures += 1;
    }
    println!(
        "criterion {n:>2} {} {title}: {}",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail
    );
    std::io::stdout().flush().ok();
    outcome.pass
}

fn skip(n: usize, title: &str) {
    println!("criterion {n:>2} SKIP {title}: BIPOSE_ACCEPTANCE_SKIP_TRAINING is set");
}

fn main() {
    let started = Instant::now();
    let skip_training = std::env::var_os("BIPOSE_ACCEPTANCE_SKIP_TRAINING").is_some();
    let mut failures = 0;
    let kernel_ok = report(1, "binary kernel oracle", criterion_1(), &mut failures);
    report(2, "finite-difference gradients", criterion_2(), &mut failures);
    report(3, "AWing smoothness", Ok(criterion_3()), &mut failures);
    report(4, "channel shuffle", Ok(criterion_4()), &mut failures);
    report(5, "pruning effect", criterion_5(), &mut failures);
    if skip_training {
        skip(6, "desk-scale training direction");
        skip(7, "loss ablation ordering");
        skip(8, "block ablation direction");
    } else {
        match Training::new() {
            Ok(mut t) => {
                report(6, "desk-scale training direction", criterion_6(&mut t), &mut failures);
                match criterion_7(&mut t) {
                    Ok((outcome, ab)) => {
                        report(7, "loss ablation ordering", Ok(outcome), &mut failures);
                        report(8, "block ablation direction", criterion_8(&mut t, &ab), &mut failures);
                    }
                    Err(e) => {
                        report(7, "loss ablation ordering", Ok(errored(&e)), &mut failures);
                        report(8, "block ablation direction", Ok(errored(&e)), &mut failures);
                    }
                }
            }
            Err(e) => {
                for (n, title) in [
                    (6, "desk-scale training direction"),
                    (7, "loss ablation ordering"),
                    (8, "block ablation direction"),
                ] {
                    report(n, title, Ok(errored(&e)), &mut failures);
                }
            }
        }
    }
    report(9, "bit-packed speedup", criterion_9(kernel_ok), &mut failures);
    report(10, "cost accounting", criterion_10(), &mut failures);
    report(11, "serialization", criterion_11(), &mut failures);
    report(12, "quarter-cell decode", criterion_12(), &mut failures);
    println!(
        "acceptance: {} failed, {:.1} min",
        failures,
        started.elapsed().as_secs_f64() / 60.0
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
