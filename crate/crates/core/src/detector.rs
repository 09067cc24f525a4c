//! Sliding-window trigger-patch detection calibrated against pure Gaussian noise,
//! plus mAP50 evaluation of any detector's boxes.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{sample_noise, LatentTensor, Region, Shape};

/// Per-window deviation statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowStatistic {
    /// `N * KL(N(m, s²) || N(0, 1))` of the moment-matched Gaussian.
    #[default]
    Kl,
    /// Plain slab variance.
    Variance,
}

/// Smallest variance fed to the logarithm; keeps constant slabs finite.
const MIN_VARIANCE: f64 = 1e-300;

/// Statistic from slab mean, population variance and cell count.
pub fn score_from_moments(statistic: WindowStatistic, mean: f64, var: f64, cells: usize) -> f64 {
    match statistic {
        WindowStatistic::Kl => {
            let v = var.max(MIN_VARIANCE);
            let kl = 0.5 * mean * mean + 0.5 * (v - 1.0 - v.ln());
            (cells as f64 * kl).max(0.0)
        }
        WindowStatistic::Variance => var.max(0.0),
    }
}

/// KL-based window score, computed directly from the slab.
pub fn window_score(noise: &LatentTensor, region: &Region) -> Result<f64> {
    region.check_bounds(&noise.shape())?;
    let values: Vec<f64> = noise.region_values(region).map(f64::from).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(score_from_moments(
        WindowStatistic::Kl,
        mean,
        var,
        values.len(),
    ))
}

/// Summed-area tables of channel sums and squared sums, for O(1) window moments.
#[derive(Debug, Clone)]
pub struct WindowScorer {
    shape: Shape,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl WindowScorer {
    pub fn new(noise: &LatentTensor) -> Self {
        let shape = noise.shape();
        let (h, w) = (shape.height, shape.width);
        let stride = w + 1;
        let mut sum = vec![0.0; (h + 1) * stride];
        let mut sq = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let (mut row_s, mut row_q) = (0.0, 0.0);
            for x in 0..w {
                for c in 0..shape.channels {
                    let v = f64::from(noise.get(c, y, x));
                    row_s += v;
                    row_q += v * v;
                }
                let i = (y + 1) * stride + x + 1;
                sum[i] = sum[i - stride] + row_s;
                sq[i] = sq[i - stride] + row_q;
            }
        }
        WindowScorer { shape, sum, sq }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    fn rect(table: &[f64], stride: usize, r: &Region) -> f64 {
        table[r.y2 * stride + r.x2] - table[r.y1 * stride + r.x2] - table[r.y2 * stride + r.x1]
            + table[r.y1 * stride + r.x1]
    }

    /// `(mean, population variance, cells)` of the slab under `region`.
    pub fn moments(&self, region: &Region) -> (f64, f64, usize) {
        let stride = self.shape.width + 1;
        let cells = region.area() * self.shape.channels;
        let n = cells as f64;
        let mean = Self::rect(&self.sum, stride, region) / n;
        let var = (Self::rect(&self.sq, stride, region) / n - mean * mean).max(0.0);
        (mean, var, cells)
    }

    pub fn score(&self, region: &Region, statistic: WindowStatistic) -> f64 {
        let (mean, var, cells) = self.moments(region);
        score_from_moments(statistic, mean, var, cells)
    }
}

/// All `window x window` positions on a `stride` grid, plus the last row and
/// column when the grid does not land on the border.
pub fn windows(shape: &Shape, window: usize, stride: usize) -> Vec<Region> {
    let axis = |len: usize| -> Vec<usize> {
        if window > len {
            return Vec::new();
        }
        let mut v: Vec<usize> = (0..=len - window).step_by(stride.max(1)).collect();
        if v.last() != Some(&(len - window)) {
            v.push(len - window);
        }
        v
    };
    let xs = axis(shape.width);
    axis(shape.height)
        .into_iter()
        .flat_map(|y| {
            xs.iter().map(move |&x| Region {
                x1: x,
                y1: y,
                x2: x + window,
                y2: y + window,
            })
        })
        .collect()
}

/// Empirical distribution of window scores on pure standard-Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub window: usize,
    pub stride: usize,
    #[serde(default)]
    pub statistic: WindowStatistic,
    pub shape: Shape,
    pub seed: u64,
    pub n_noises: usize,
    pub sample_count: usize,
    /// Scores at evenly spaced levels `i / (len - 1)`, nondecreasing.
    pub quantiles: Vec<f64>,
}

pub const DEFAULT_WINDOW: usize = 24;
pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.999;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
const QUANTILE_LEVELS: usize = 2001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub window: usize,
    pub stride: usize,
    pub statistic: WindowStatistic,
    pub shape: Shape,
    pub n_noises: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            statistic: WindowStatistic::Kl,
            shape: Shape::default(),
            n_noises: 200,
            seed: 0,
        }
    }
}

pub fn calibrate_null(
    window: usize,
    stride: usize,
    n_noises: usize,
    seed: u64,
) -> Result<NullCalibration> {
    calibrate(&CalibrationConfig {
        window,
        stride,
        n_noises,
        seed,
        ..Default::default()
    })
}

pub fn calibrate(config: &CalibrationConfig) -> Result<NullCalibration> {
    if config.n_noises < 100 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 100 noises, got {}",
            config.n_noises
        )));
    }
    if config.window == 0 || config.stride == 0 {
        return Err(Error::InvalidArgument(
            "window and stride must be positive".into(),
        ));
    }
    let regions = windows(&config.shape, config.window, config.stride);
    if regions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "window {} does not fit shape {}",
            config.window, config.shape
        )));
    }
    let per_noise: Vec<Vec<f64>> = (0..config.n_noises)
        .into_par_iter()
        .map(|i| {
            let noise = sample_noise(rng::derive_seed(config.seed, i as u64), config.shape)?;
            let scorer = WindowScorer::new(&noise);
            Ok(regions
                .iter()
                .map(|r| scorer.score(r, config.statistic))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut scores: Vec<f64> = per_noise.into_iter().flatten().collect();
    scores.sort_by(f64::total_cmp);
    let last = (scores.len() - 1) as f64;
    let quantiles = (0..QUANTILE_LEVELS)
        .map(|k| {
            let pos = k as f64 / (QUANTILE_LEVELS - 1) as f64 * last;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            scores[lo] + (scores[hi] - scores[lo]) * (pos - lo as f64)
        })
        .collect();
    Ok(NullCalibration {
        window: config.window,
        stride: config.stride,
        statistic: config.statistic,
        shape: config.shape,
        seed: config.seed,
        n_noises: config.n_noises,
        sample_count: scores.len(),
        quantiles,
    })
}

impl NullCalibration {
    fn levels(&self) -> f64 {
        (self.quantiles.len() - 1) as f64
    }

    /// Null CDF at `score`, linearly interpolated between table entries.
    pub fn confidence(&self, score: f64) -> f64 {
        let q = &self.quantiles;
        if score < q[0] {
            return 0.0;
        }
        if score >= q[q.len() - 1] {
            return 1.0;
        }
        // Largest i with q[i] <= score.
        let i = q.partition_point(|&v| v <= score) - 1;
        let span = q[i + 1] - q[i];
        let frac = if span > 0.0 {
            (score - q[i]) / span
        } else {
            0.0
        };
        ((i as f64 + frac) / self.levels()).clamp(0.0, 1.0)
    }

    /// Score at null level `p` in `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let pos = p.clamp(0.0, 1.0) * self.levels();
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        self.quantiles[lo] + (self.quantiles[hi] - self.quantiles[lo]) * (pos - lo as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.quantiles.len() < 2 || self.quantiles.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::SchemaViolation(
                "calibration quantile table must be nondecreasing with at least 2 entries".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let calib: NullCalibration = serde_json::from_str(&text)?;
        calib.validate()?;
        Ok(calib)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub region: Region,
    pub score: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        self.region.center()
    }
}

/// Scores every calibration window of `noise`, in window order.
pub fn score_windows(noise: &LatentTensor, calibration: &NullCalibration) -> Vec<Detection> {
    let scorer = WindowScorer::new(noise);
    windows(&noise.shape(), calibration.window, calibration.stride)
        .into_iter()
        .map(|region| {
            let score = scorer.score(&region, calibration.statistic);
            Detection {
                region,
                score,
                confidence: calibration.confidence(score),
            }
        })
        .collect()
}

fn rank(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(b.score.total_cmp(&a.score))
        .then(a.region.cmp(&b.region))
}

/// Greedy non-maximum suppression: drop any box whose IoU with an already
/// kept, higher-ranked box is at least `iou`.
pub fn nms(mut candidates: Vec<Detection>, iou: f64) -> Vec<Detection> {
    candidates.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.region.iou(&c.region) < iou) {
            kept.push(c);
        }
    }
    kept
}

/// Windows with null confidence at least `min_confidence`, after NMS, best first.
pub fn detect(
    noise: &LatentTensor,
    calibration: &NullCalibration,
    min_confidence: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let candidates = score_windows(noise, calibration)
        .into_iter()
        .filter(|d| d.confidence >= min_confidence)
        .collect();
    nms(candidates, nms_iou)
}

/// Axis-aligned box in latent cells with real coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn iou(&self, other: &BoxF) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

impl From<Region> for BoxF {
    fn from(r: Region) -> Self {
        BoxF {
            x1: r.x1 as f64,
            y1: r.y1 as f64,
            x2: r.x2 as f64,
            y2: r.y2 as f64,
        }
    }
}

impl From<&crate::annotations::BBoxAnnotation> for BoxF {
    fn from(b: &crate::annotations::BBoxAnnotation) -> Self {
        BoxF {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

/// One box of an external (or our own) detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ScoredBox {
    pub fn bounds(&self) -> BoxF {
        BoxF {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        let b = BoxF::from(d.region);
        ScoredBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            confidence: d.confidence,
            score: Some(d.score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDetections {
    pub noise_id: String,
    pub boxes: Vec<ScoredBox>,
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<NoiseDetections>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<NoiseDetections> = serde_json::from_str(&text)?;
    for e in &entries {
        for b in &e.boxes {
            if !(b.x1 < b.x2 && b.y1 < b.y2) || !(0.0..=1.0).contains(&b.confidence) {
                return Err(Error::SchemaViolation(format!(
                    "bad detection box for noise `{}`",
                    e.noise_id
                )));
            }
        }
    }
    Ok(entries)
}

pub const MAP_IOU: f64 = 0.5;

/// Detections and ground truth for one noise, in the same latent space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<ScoredBox>,
    pub ground_truth: Vec<BoxF>,
}

/// Class-agnostic average precision at IoU 0.5 with all-point interpolation.
///
/// Detections from all images are ranked by confidence, then by raw score when
/// both carry one (confidence saturates at 1 past the calibrated range), then
/// input order. Each
/// one matches the unmatched ground-truth box of its image with the highest
/// IoU, provided that IoU is at least 0.5.
pub fn map50(images: &[EvalImage]) -> f64 {
    let total_gt: usize = images.iter().map(|i| i.ground_truth.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, &ScoredBox)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| img.detections.iter().map(move |d| (i, d)))
        .collect();
    ranked.sort_by(|a, b| {
        let tie = match (a.1.score, b.1.score) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            _ => std::cmp::Ordering::Equal,
        };
        b.1.confidence.total_cmp(&a.1.confidence).then(tie)
    });

    let mut matched: Vec<Vec<bool>> = images
        .iter()
        .map(|i| vec![false; i.ground_truth.len()])
        .collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, (img, det)) in ranked.iter().enumerate() {
        let b = det.bounds();
        let best = images[*img]
            .ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !matched[*img][*g])
            .map(|(g, gt)| (g, gt.iou(&b)))
            .filter(|(_, iou)| *iou >= MAP_IOU)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            matched[*img][g] = true;
            tp += 1;
        }
        let precision = tp as f64 / (k + 1) as f64;
        let recall = tp as f64 / total_gt as f64;
        curve.push((recall, precision));
    }
    // Precision envelope from the right, then sum over recall steps.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    let mut env: Vec<f64> = vec![0.0; curve.len()];
    for (i, &(_, p)) in curve.iter().enumerate().rev() {
        envelope = envelope.max(p);
        env[i] = envelope;
    }
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * env[i];
            prev_recall = r;
        }
    }
    ap
}
