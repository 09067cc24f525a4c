//! Posterior metrics over generated-object boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{BBoxAnnotation, Space};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Region;

/// Dispersion of box centers for one noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub noise_id: String,
    pub n: usize,
    pub mean_center: (f64, f64),
    /// `½ (popvar(x_c) + popvar(y_c))`, in latent cells².
    pub entropy: f64,
    pub centers: Vec<(f64, f64)>,
}

/// Trigger entropy from box centers, using population (1/n) variances.
pub fn entropy_of_centers(centers: &[(f64, f64)]) -> Result<(f64, (f64, f64))> {
    if centers.is_empty() {
        return Err(Error::EmptyInput("trigger entropy needs at least one box"));
    }
    // Offsets from the first center: exact for grid-aligned boxes, so a
    // translation by whole cells leaves the result bit-identical.
    let (ox, oy) = centers[0];
    let n = centers.len() as f64;
    let dx = centers.iter().map(|c| c.0 - ox).sum::<f64>() / n;
    let dy = centers.iter().map(|c| c.1 - oy).sum::<f64>() / n;
    let vx = centers.iter().map(|c| (c.0 - ox - dx).powi(2)).sum::<f64>() / n;
    let vy = centers.iter().map(|c| (c.1 - oy - dy).powi(2)).sum::<f64>() / n;
    Ok((0.5 * (vx + vy), (ox + dx, oy + dy)))
}

pub fn trigger_entropy(noise_id: &str, boxes: &[BBoxAnnotation]) -> Result<EntropyReport> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("trigger entropy needs at least one box"));
    }
    for b in boxes {
        b.expect_space(Space::Latent)?;
    }
    let centers: Vec<(f64, f64)> = boxes.iter().map(BBoxAnnotation::center).collect();
    let (entropy, mean_center) = entropy_of_centers(&centers)?;
    Ok(EntropyReport {
        noise_id: noise_id.to_owned(),
        n: boxes.len(),
        mean_center,
        entropy,
        centers,
    })
}

/// Entropy of uniformly random boxes: each box is four integers drawn from
/// `[0, range)` (image pixels), sorted into corners, then divided by `scale`
/// to land in latent cells. Returns one report per trial.
pub fn random_center_baseline(
    n_boxes: usize,
    range: u32,
    scale: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<EntropyReport>> {
    if n_boxes < 2 {
        return Err(Error::InvalidArgument(
            "random baseline needs at least 2 boxes".into(),
        ));
    }
    if range < 2 || scale.is_nan() || scale <= 0.0 {
        return Err(Error::InvalidArgument(
            "range must be >= 2 and scale positive".into(),
        ));
    }
    (0..trials)
        .map(|t| {
            let mut rng = rng::chacha(rng::derive_seed(seed, t as u64));
            let centers: Vec<(f64, f64)> = (0..n_boxes)
                .map(|_| {
                    let (x1, x2) = random_span(&mut rng, range);
                    let (y1, y2) = random_span(&mut rng, range);
                    (
                        f64::from(x1 + x2) / 2.0 / scale,
                        f64::from(y1 + y2) / 2.0 / scale,
                    )
                })
                .collect();
            let (entropy, mean_center) = entropy_of_centers(&centers)?;
            Ok(EntropyReport {
                noise_id: format!("random-{t}"),
                n: n_boxes,
                mean_center,
                entropy,
                centers,
            })
        })
        .collect()
}

/// Two distinct integers from `[0, range)`, ordered.
pub(crate) fn random_span(rng: &mut impl Rng, range: u32) -> (u32, u32) {
    loop {
        let a = rng.random_range(0..range);
        let b = rng.random_range(0..range);
        if a != b {
            return (a.min(b), a.max(b));
        }
    }
}

/// Expected random-baseline entropy: each center coordinate is the midpoint of
/// two uniforms with variance `range² / 24`; population variance over `n` boxes
/// scales that by `(n - 1) / n`.
pub fn random_baseline_expectation(n_boxes: usize, range: f64) -> f64 {
    let n = n_boxes as f64;
    (n - 1.0) / n * range * range / 24.0
}

/// Fraction of `trigger` covered by `detected` (latent cells).
pub fn coverage(trigger: &Region, detected: &BBoxAnnotation) -> Result<f64> {
    detected.expect_space(Space::Latent)?;
    let ix = (detected.x2.min(trigger.x2 as f64) - detected.x1.max(trigger.x1 as f64)).max(0.0);
    let iy = (detected.y2.min(trigger.y2 as f64) - detected.y1.max(trigger.y1 as f64)).max(0.0);
    Ok(ix * iy / trigger.area() as f64)
}

pub const INJECTION_COVERAGE: f64 = 0.75;

/// An injection succeeds when the detected box covers at least 75% of the trigger region.
pub fn injection_success(trigger: &Region, detected: &BBoxAnnotation) -> Result<bool> {
    Ok(coverage(trigger, detected)? >= INJECTION_COVERAGE)
}

/// One injection trial: where the patch went and what was detected, if anything.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionCase {
    pub trigger: Region,
    pub detected: Option<BBoxAnnotation>,
}

/// Injection success rate; a missing detection counts as a failure.
pub fn isr(cases: &[InjectionCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("ISR needs at least one case"));
    }
    let mut hits = 0usize;
    for case in cases {
        if let Some(d) = &case.detected {
            if injection_success(&case.trigger, d)? {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

/// Row-major `height x width` grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width)
    }
}

/// Fraction of boxes covering each cell; a cell is covered when its center lies in the box.
pub fn heatmap(boxes: &[BBoxAnnotation], height: usize, width: usize) -> Result<Heatmap> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("heatmap needs at least one box"));
    }
    let mut counts = vec![0u32; height * width];
    for b in boxes {
        b.expect_space(Space::Latent)?;
        let span = |lo: f64, hi: f64, max: usize| {
            let start = (lo - 0.5).ceil().max(0.0) as usize;
            let end = ((hi - 0.5).ceil().max(0.0) as usize).min(max);
            start..end
        };
        for y in span(b.y1, b.y2, height) {
            for x in span(b.x1, b.x2, width) {
                counts[y * width + x] += 1;
            }
        }
    }
    let n = boxes.len() as f64;
    Ok(Heatmap {
        height,
        width,
        values: counts.into_iter().map(|c| f64::from(c) / n).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::InvalidArgument(format!("unknown side `{other}`"))),
        }
    }
}

/// Whether a center x coordinate lies strictly on `side` of the vertical midline.
pub fn center_on_side(cx: f64, side: Side, width: f64) -> bool {
    let mid = width / 2.0;
    match side {
        Side::Left => cx < mid,
        Side::Right => cx > mid,
    }
}

pub fn judge_position(b: &BBoxAnnotation, side: Side, width: usize) -> Result<bool> {
    b.expect_space(Space::Latent)?;
    Ok(center_on_side(b.center().0, side, width as f64))
}

/// Guidance success rate: fraction of cases whose box sits on the prompted side.
pub fn gsr(cases: &[(Side, Option<BBoxAnnotation>)], width: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("GSR needs at least one case"));
    }
    let mut hits = 0usize;
    for (side, b) in cases {
        if let Some(b) = b {
            if judge_position(b, *side, width)? {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InteractionLabel {
    Aligned,
    Contradicted,
    Duplicated,
    HardToJudge,
}

/// Width fraction of the central strip whose boxes count as "in the middle".
pub const CENTER_STRIP: f64 = 0.10;
/// Boxes wider than this fraction of the frame occupy "the entire picture".
pub const FULL_FRAME: f64 = 0.80;

/// Labels one generated image from its boxes.
///
/// A box spanning more than 80% of the width makes the image hard to judge.
/// Otherwise boxes whose center lies in the middle 10% strip are ignored; if
/// none remain the image is hard to judge, if the rest fall on both halves it
/// is duplicated, and otherwise it is aligned or contradicted depending on
/// which half they occupy.
pub fn classify_interaction(
    boxes: &[BBoxAnnotation],
    side: Side,
    width: usize,
) -> Result<InteractionLabel> {
    let w = width as f64;
    let mut left = 0usize;
    let mut right = 0usize;
    for b in boxes {
        b.expect_space(Space::Latent)?;
        if b.width() > FULL_FRAME * w {
            return Ok(InteractionLabel::HardToJudge);
        }
        let cx = b.center().0;
        if (cx - w / 2.0).abs() <= CENTER_STRIP * w / 2.0 {
            continue;
        }
        if cx < w / 2.0 {
            left += 1;
        } else {
            right += 1;
        }
    }
    let (on_side, off_side) = match side {
        Side::Left => (left, right),
        Side::Right => (right, left),
    };
    Ok(match (on_side, off_side) {
        (0, 0) => InteractionLabel::HardToJudge,
        (_, 0) => InteractionLabel::Aligned,
        (0, _) => InteractionLabel::Contradicted,
        _ => InteractionLabel::Duplicated,
    })
}
