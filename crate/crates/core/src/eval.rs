//! Heatmap targets and decoding, OKS/AP and PCKh metrics, and metric reports.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autograd::Layer;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::synthdata::{collate, Sample};
use crate::tensor::FloatTensor;

/// Gaussian width of target heatmaps, in heatmap cells.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Per-joint COCO falloff constants `k_i` (twice the published per-joint
/// sigmas), in COCO joint order.
pub const COCO_FALLOFF: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214,
    0.174, 0.174, 0.178, 0.178,
];

/// COCO indices used for the five synthetic joints: nose (head), left and
/// right wrist, left and right ankle.
pub const SYNTH_COCO_JOINTS: [usize; 5] = [0, 9, 10, 15, 16];

pub fn synth_falloff() -> Vec<f64> {
    SYNTH_COCO_JOINTS.iter().map(|&i| COCO_FALLOFF[i]).collect()
}

/// One keypoint in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Ground-truth or predicted keypoints of one person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    /// Person scale `s` used by OKS.
    pub scale: f64,
    /// Falloff constant `k_i` per joint.
    pub falloff: Vec<f64>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>, scale: f64, falloff: Vec<f64>) -> Result<Self> {
        if falloff.len() != points.len() {
            return Err(Error::invalid(format!(
                "{} falloff constants for {} joints",
                falloff.len(),
                points.len()
            )));
        }
        if !(scale > 0.0) || falloff.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::invalid("scale and falloff constants must be positive"));
        }
        Ok(Self {
            points,
            scale,
            falloff,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-joint confidence grids `(K, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub maps: FloatTensor,
    /// Input pixels per heatmap cell.
    pub stride: f64,
    pub sigma: f64,
}

impl Heatmap {
    pub fn new(maps: FloatTensor, stride: f64, sigma: f64) -> Result<Self> {
        if maps.shape().len() != 3 {
            return Err(Error::invalid(format!("heatmap must be (K, h, w), got {:?}", maps.shape())));
        }
        Ok(Self { maps, stride, sigma })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.maps.shape();
        (s[0], s[1], s[2])
    }
}

/// Unit-peak Gaussian targets; invisible joints get an all-zero map.
/// Keypoint `(x, y)` maps to cell coordinate `(x, y) / stride`.
pub fn encode_heatmap(kps: &[Keypoint], dims: (usize, usize), stride: f64, sigma: f64) -> Heatmap {
    let (h, w) = dims;
    let mut data = vec![0.0; kps.len() * h * w];
    let denom = 2.0 * sigma * sigma;
    for (kp, plane) in kps.iter().zip(data.chunks_mut(h * w)) {
        if !kp.visible {
            continue;
        }
        let (cx, cy) = (kp.x / stride, kp.y / stride);
        for (r, row) in plane.chunks_mut(w).enumerate() {
            let dy = r as f64 - cy;
            for (c, v) in row.iter_mut().enumerate() {
                let dx = c as f64 - cx;
                *v = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Heatmap {
        maps: FloatTensor::from_parts(vec![kps.len(), h, w], data),
        stride,
        sigma,
    }
}

/// A decoded joint location in input pixels with its peak response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

fn quarter_shift(lo: Option<f64>, hi: Option<f64>) -> f64 {
    match (lo, hi) {
        (Some(l), Some(h)) if h > l => 0.25,
        (Some(l), Some(h)) if l > h => -0.25,
        _ => 0.0,
    }
}

/// Argmax per joint (first maximum in row-major order), shifted a quarter
/// cell toward the larger of the two neighbours on each axis, then scaled to
/// input pixels. Maps with no positive response are undetected.
pub fn decode_heatmap(hm: &Heatmap) -> Vec<Option<Detection>> {
    let (k, h, w) = hm.dims();
    let data = hm.maps.data();
    (0..k)
        .map(|j| {
            let plane = &data[j * h * w..(j + 1) * h * w];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            let peak = plane[best];
            if !(peak > 0.0) {
                return None;
            }
            let (r, c) = (best / w, best % w);
            let at = |rr: usize, cc: usize| plane[rr * w + cc];
            let dx = quarter_shift(
                (c > 0).then(|| at(r, c - 1)),
                (c + 1 < w).then(|| at(r, c + 1)),
            );
            let dy = quarter_shift(
                (r > 0).then(|| at(r - 1, c)),
                (r + 1 < h).then(|| at(r + 1, c)),
            );
            Some(Detection {
                x: (c as f64 + dx) * hm.stride,
                y: (r as f64 + dy) * hm.stride,
                score: peak,
            })
        })
        .collect()
}

fn dist2(d: &Option<Detection>, g: &Keypoint) -> f64 {
    match d {
        Some(d) => (d.x - g.x).powi(2) + (d.y - g.y).powi(2),
        None => f64::INFINITY,
    }
}

/// Object keypoint similarity of `pred` against `gt` over visible joints.
/// Undetected joints contribute zero.
pub fn oks(pred: &[Option<Detection>], gt: &KeypointSet) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predictions for {} joints", pred.len(), gt.len())));
    }
    let mut num = 0.0;
    let mut visible = 0usize;
    for ((p, g), k) in pred.iter().zip(&gt.points).zip(&gt.falloff) {
        if g.visible {
            visible += 1;
            num += (-dist2(p, g) / (2.0 * gt.scale * gt.scale * k * k)).exp();
        }
    }
    if visible == 0 {
        return Err(Error::UndefinedMetric("no visible ground-truth keypoints".into()));
    }
    Ok(num / visible as f64)
}

/// OKS thresholds 0.50, 0.55, …, 0.95.
pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Single-person AP: one ground truth per image matched to one prediction, so
/// precision at a threshold is the fraction of instances reaching it.
pub fn average_precision(oks_values: &[f64]) -> Result<ApScores> {
    if oks_values.is_empty() {
        return Err(Error::UndefinedMetric("average precision of an empty dataset".into()));
    }
    let n = oks_values.len() as f64;
    let at = |t: f64| oks_values.iter().filter(|&&o| o >= t).count() as f64 / n;
    let ts = oks_thresholds();
    Ok(ApScores {
        ap: ts.iter().map(|&t| at(t)).sum::<f64>() / ts.len() as f64,
        ap50: at(ts[0]),
        ap75: at(ts[5]),
    })
}

/// Counts of correct and visible joints at threshold `alpha · head_length`.
pub fn pckh_counts(
    pred: &[Option<Detection>],
    gt: &[Keypoint],
    head_length: f64,
    alpha: f64,
) -> Result<(usize, usize)> {
    if !(head_length > 0.0) {
        return Err(Error::invalid(format!("head length {head_length} must be positive")));
    }
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predictions for {} joints", pred.len(), gt.len())));
    }
    let limit = alpha * head_length;
    let mut correct = 0;
    let mut visible = 0;
    for (p, g) in pred.iter().zip(gt) {
        if g.visible {
            visible += 1;
            if dist2(p, g).sqrt() <= limit {
                correct += 1;
            }
        }
    }
    Ok((correct, visible))
}

/// Fraction of visible joints within `alpha · head_length` pixels.
pub fn pckh(pred: &[Option<Detection>], gt: &[Keypoint], head_length: f64, alpha: f64) -> Result<f64> {
    let (c, v) = pckh_counts(pred, gt, head_length, alpha)?;
    if v == 0 {
        return Err(Error::UndefinedMetric("no visible joints".into()));
    }
    Ok(c as f64 / v as f64)
}

/// Metric report with fixed field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    #[serde(rename = "pckh@0.5")]
    pub pckh50: f64,
    #[serde(rename = "pckh@0.1")]
    pub pckh10: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Single person per image, one prediction per ground truth.
    pub ap_protocol: String,
    pub params: usize,
    pub binary_weights: usize,
    pub flops: u64,
    pub bops: u64,
    pub ops: f64,
}

/// Per-sample decoded predictions.
pub fn predict_samples(net: &mut Network, samples: &[Sample], batch: usize) -> Result<Vec<Vec<Option<Detection>>>> {
    let (hh, hw) = net.config().heatmap_dims();
    let stride = net.config().input_h as f64 / hh as f64;
    let joints = net.config().joints;
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = collate(samples, chunk, (hh, hw), stride, DEFAULT_SIGMA)?;
        let y = net.forward(&x, crate::autograd::Pass::EVAL)?;
        for i in 0..chunk.len() {
            let maps = FloatTensor::from_parts(vec![joints, hh, hw], y.sample(i).to_vec());
            out.push(decode_heatmap(&Heatmap::new(maps, stride, DEFAULT_SIGMA)?));
        }
    }
    Ok(out)
}

/// PCKh@0.5 over `samples`, pooled over all visible joints.
pub fn pck_of(preds: &[Vec<Option<Detection>>], samples: &[Sample], alpha: f64) -> Result<f64> {
    let (mut c, mut v) = (0, 0);
    for (p, s) in preds.iter().zip(samples) {
        let (ci, vi) = pckh_counts(p, &s.keypoints.points, s.head_length, alpha)?;
        c += ci;
        v += vi;
    }
    if v == 0 {
        return Err(Error::UndefinedMetric("no visible joints".into()));
    }
    Ok(c as f64 / v as f64)
}

/// Full metric report for `net` on `samples`.
pub fn evaluate(net: &mut Network, samples: &[Sample]) -> Result<MetricReport> {
    let preds = predict_samples(net, samples, 16)?;
    let oks_values = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| oks(p, &s.keypoints))
        .collect::<Result<Vec<_>>>()?;
    let ap = average_precision(&oks_values)?;
    let cost = net.cost_report();
    Ok(MetricReport {
        samples: samples.len(),
        pckh50: pck_of(&preds, samples, 0.5)?,
        pckh10: pck_of(&preds, samples, 0.1)?,
        ap: ap.ap,
        ap50: ap.ap50,
        ap75: ap.ap75,
        ap_protocol: "single-person, 1:1 matching".into(),
        params: cost.params,
        binary_weights: cost.binary_weights,
        flops: cost.ops.flops,
        bops: cost.ops.bops,
        ops: cost.ops.ops(),
    })
}

/// One predicted or ground-truth joint as a line-delimited record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub image: usize,
    pub joint: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

pub fn prediction_records(preds: &[Vec<Option<Detection>>]) -> Vec<PointRecord> {
    preds
        .iter()
        .enumerate()
        .flat_map(|(image, p)| {
            p.iter().enumerate().filter_map(move |(joint, d)| {
                d.map(|d| PointRecord {
                    image,
                    joint,
                    x: d.x,
                    y: d.y,
                    score: d.score,
                })
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(out: &mut impl Write, records: &[T]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint { x, y, visible: true }
    }

    fn map_with(h: usize, w: usize, cells: &[(usize, usize, f64)]) -> Heatmap {
        let mut t = FloatTensor::zeros(&[1, h, w]);
        for &(r, c, v) in cells {
            t.data_mut()[r * w + c] = v;
        }
        Heatmap::new(t, 1.0, 1.0).unwrap()
    }

    #[test]
    fn encode_peak_and_sigma_falloff() {
        let hm = encode_heatmap(&[kp(20.0, 12.0), Keypoint { visible: false, ..kp(1.0, 1.0) }], (16, 16), 4.0, 2.0);
        let d = hm.maps.data();
        assert_eq!(d[3 * 16 + 5], 1.0);
        // two cells = one sigma away
        assert!((d[3 * 16 + 7] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(d[256..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_pixel_rule() {
        let right = map_with(11, 11, &[(5, 5, 1.0), (5, 6, 0.6), (5, 4, 0.3)]);
        let d = decode_heatmap(&right)[0].unwrap();
        assert_eq!((d.x, d.y), (5.25, 5.0));
        let sym = map_with(11, 11, &[(5, 5, 1.0), (5, 6, 0.5), (5, 4, 0.5), (4, 5, 0.5), (6, 5, 0.5)]);
        let d = decode_heatmap(&sym)[0].unwrap();
        assert_eq!((d.x, d.y), (5.0, 5.0));
    }

    #[test]
    fn ties_take_first_maximum_and_zero_maps_are_undetected() {
        let tie = map_with(4, 4, &[(1, 2, 1.0), (3, 0, 1.0)]);
        let d = decode_heatmap(&tie)[0].unwrap();
        assert_eq!((d.x, d.y), (2.0, 1.0));
        assert_eq!(decode_heatmap(&map_with(4, 4, &[]))[0], None);
    }

    #[test]
    fn round_trip_on_grid_is_within_a_quarter_cell() {
        for (x, y) in [(8.0, 8.0), (0.0, 60.0), (36.0, 20.0)] {
            let hm = encode_heatmap(&[kp(x, y)], (16, 16), 4.0, 2.0);
            let d = decode_heatmap(&hm)[0].unwrap();
            assert!((d.x - x).abs() <= 1.0 && (d.y - y).abs() <= 1.0);
        }
    }

    #[test]
    fn decode_error_is_at_most_half_a_cell() {
        for i in 0..200 {
            let (x, y) = (4.0 + i as f64 * 0.27 % 50.0, 5.0 + i as f64 * 0.61 % 50.0);
            for sigma in [1.0, 2.0, 3.0] {
                let hm = encode_heatmap(&[kp(x, y)], (16, 16), 4.0, sigma);
                let d = decode_heatmap(&hm)[0].unwrap();
                assert!((d.x - x).abs() <= 2.0 && (d.y - y).abs() <= 2.0, "{x} {y}");
            }
        }
    }

    fn gt(points: Vec<Keypoint>, s: f64, k: f64) -> KeypointSet {
        let n = points.len();
        KeypointSet::new(points, s, vec![k; n]).unwrap()
    }

    fn det(x: f64, y: f64) -> Option<Detection> {
        Some(Detection { x, y, score: 1.0 })
    }

    #[test]
    fn oks_examples() {
        let g = gt(vec![kp(1.0, 2.0), kp(3.0, 4.0)], 10.0, 0.1);
        assert_eq!(oks(&[det(1.0, 2.0), det(3.0, 4.0)], &g).unwrap(), 1.0);
        // d = s·k = 1
        let one = gt(vec![kp(0.0, 0.0)], 10.0, 0.1);
        let v = oks(&[det(1.0, 0.0)], &one).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        let half = oks(&[det(1.0, 2.0), None], &g).unwrap();
        assert_eq!(half, 0.5);
        let far = oks(&[det(1.0, 2.0), det(1e200, 0.0)], &g).unwrap();
        assert_eq!(far, 0.5);
        let hidden = gt(vec![Keypoint { visible: false, ..kp(0.0, 0.0) }], 1.0, 0.1);
        assert!(matches!(oks(&[det(0.0, 0.0)], &hidden), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        let perfect = average_precision(&[1.0; 5]).unwrap();
        assert_eq!((perfect.ap, perfect.ap50, perfect.ap75), (1.0, 1.0, 1.0));
        let s = average_precision(&[0.6; 7]).unwrap();
        assert_eq!((s.ap50, s.ap75), (1.0, 0.0));
        assert!((s.ap - 0.3).abs() < 1e-12);
        assert!(average_precision(&[]).is_err());
    }

    #[test]
    fn pckh_examples() {
        let g = [kp(0.0, 0.0)];
        assert_eq!(pckh(&[det(4.0, 0.0)], &g, 10.0, 0.5).unwrap(), 1.0);
        assert_eq!(pckh(&[det(6.0, 0.0)], &g, 10.0, 0.5).unwrap(), 0.0);
        assert_eq!(pckh(&[None], &g, 10.0, 0.5).unwrap(), 0.0);
        assert!(matches!(pckh(&[det(0.0, 0.0)], &g, 0.0, 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = prediction_records(&[vec![det(1.0, 2.0), None], vec![det(3.5, 4.0)]]);
        assert_eq!(recs.len(), 2);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back: Vec<PointRecord> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, recs);
        assert!(read_jsonl::<PointRecord>(&b"{oops"[..]).is_err());
    }
}
