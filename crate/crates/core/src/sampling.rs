//! Reject-sampling workflows driven by the detector.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{diversity_prompts, filter_best, rescale_to_latent};
use crate::backend::{Backend, GenerationRequest};
use crate::detector::{detect, Detection, NullCalibration, DEFAULT_NMS_IOU};
use crate::error::{Error, Result};
use crate::metrics::{center_on_side, trigger_entropy, Side};
use crate::rng;
use crate::tensor::{resample_region, sample_noise, LatentTensor, Region, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct PurifyResult {
    pub noise: LatentTensor,
    /// Detect passes run.
    pub iterations: usize,
    /// Regions regenerated in each pass that found something.
    pub regenerated: Vec<Vec<Region>>,
    pub converged: bool,
}

/// Regenerates detected windows with fresh, unmatched normals until a detect
/// pass comes back empty or `max_iters` passes have run.
pub fn purify(
    noise: &LatentTensor,
    calibration: &NullCalibration,
    min_confidence: f64,
    max_iters: usize,
    seed: u64,
) -> Result<PurifyResult> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument(
            "max_iters must be at least 1".into(),
        ));
    }
    let mut current = noise.clone();
    let mut regenerated = Vec::new();
    for pass in 0..max_iters {
        let found = detect(&current, calibration, min_confidence, DEFAULT_NMS_IOU);
        if found.is_empty() {
            return Ok(PurifyResult {
                noise: current,
                iterations: pass + 1,
                regenerated,
                converged: true,
            });
        }
        let pass_seed = rng::derive_seed(seed, pass as u64);
        let mut regions = Vec::with_capacity(found.len());
        for (k, d) in found.iter().enumerate() {
            current = resample_region(
                &current,
                &d.region,
                rng::derive_seed(pass_seed, k as u64),
                false,
            )?;
            regions.push(d.region);
        }
        regenerated.push(regions);
    }
    Ok(PurifyResult {
        noise: current,
        iterations: max_iters,
        regenerated,
        converged: false,
    })
}

/// Where the top detection has to land.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignTarget {
    /// Strictly left or right of the vertical midline.
    Side(Side),
    /// Half-open latent rectangle.
    Region(Region),
}

impl AlignTarget {
    pub fn contains(&self, (cx, cy): (f64, f64), shape: &Shape) -> bool {
        match self {
            AlignTarget::Side(side) => center_on_side(cx, *side, shape.width as f64),
            AlignTarget::Region(r) => {
                cx >= r.x1 as f64 && cx < r.x2 as f64 && cy >= r.y1 as f64 && cy < r.y2 as f64
            }
        }
    }

    pub fn region(&self, shape: &Shape) -> Region {
        match self {
            AlignTarget::Side(side) => Region::half_plane(*side, shape),
            AlignTarget::Region(r) => *r,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignResult {
    /// The accepted noise, or the last candidate tried on failure.
    pub noise: LatentTensor,
    pub attempts: usize,
    /// Top detection of `noise`, if any.
    pub detection: Option<Detection>,
    pub target: AlignTarget,
    pub success: bool,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    pub min_confidence: f64,
    pub max_attempts: usize,
    pub shape: Shape,
}

impl Default for AlignParams {
    fn default() -> Self {
        AlignParams {
            min_confidence: crate::detector::DEFAULT_MIN_CONFIDENCE,
            max_attempts: 200,
            shape: Shape::default(),
        }
    }
}

const ALIGN_BATCH: usize = 16;

/// Draws whole noises `derive_seed(seed, i)` for `i = 0, 1, ...` and accepts the
/// first whose top detection has its center inside `target`.
///
/// Candidates are scored in parallel batches; the lowest accepted index wins.
pub fn align(
    target: AlignTarget,
    calibration: &NullCalibration,
    params: &AlignParams,
    seed: u64,
) -> Result<AlignResult> {
    if params.max_attempts == 0 {
        return Err(Error::InvalidArgument(
            "max_attempts must be at least 1".into(),
        ));
    }
    if let AlignTarget::Region(r) = target {
        r.check_bounds(&params.shape)?;
    }
    let evaluate = |i: usize| -> Result<(LatentTensor, Option<Detection>, u64)> {
        let s = rng::derive_seed(seed, i as u64);
        let noise = sample_noise(s, params.shape)?;
        let top = detect(&noise, calibration, params.min_confidence, DEFAULT_NMS_IOU)
            .into_iter()
            .next();
        Ok((noise, top, s))
    };
    let accepted = |top: &Option<Detection>| {
        top.as_ref()
            .is_some_and(|d| target.contains(d.center(), &params.shape))
    };
    let mut start = 0;
    while start < params.max_attempts {
        let end = (start + ALIGN_BATCH).min(params.max_attempts);
        let batch: Vec<_> = (start..end)
            .into_par_iter()
            .map(evaluate)
            .collect::<Result<_>>()?;
        if let Some(k) = batch.iter().position(|(_, top, _)| accepted(top)) {
            let (noise, detection, noise_seed) = batch.into_iter().nth(k).expect("index in batch");
            return Ok(AlignResult {
                noise,
                attempts: start + k + 1,
                detection,
                target,
                success: true,
                noise_seed,
            });
        }
        if end == params.max_attempts {
            let (noise, detection, noise_seed) = batch.into_iter().last().expect("nonempty batch");
            return Ok(AlignResult {
                noise,
                attempts: end,
                detection,
                target,
                success: false,
                noise_seed,
            });
        }
        start = end;
    }
    unreachable!("max_attempts >= 1")
}

pub const DIVERSITY_MIN_SCORE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityParams {
    pub n_seeds: usize,
    pub purified: bool,
    pub min_confidence: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub shape: Shape,
}

impl Default for DiversityParams {
    fn default() -> Self {
        DiversityParams {
            n_seeds: 200,
            purified: false,
            min_confidence: 0.99,
            max_iters: 10,
            seed: 0,
            shape: Shape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub purified: bool,
    pub n_seeds: usize,
    pub mean_entropy: f64,
    /// Per-noise entropy; `None` when fewer than two prompts produced a box.
    pub entropies: Vec<Option<f64>>,
    pub not_converged: usize,
}

/// Mean trigger entropy over `n_seeds` noises (optionally purified first) for
/// the scene prompts, keeping the best box per prompt above 0.75.
pub fn diversity_eval(
    backend: &dyn Backend,
    calibration: &NullCalibration,
    params: &DiversityParams,
) -> Result<DiversityReport> {
    if params.n_seeds == 0 {
        return Err(Error::InvalidArgument("n_seeds must be at least 1".into()));
    }
    let prompts = diversity_prompts();
    let per_noise: Vec<(Option<f64>, bool)> = (0..params.n_seeds)
        .into_par_iter()
        .map(|i| {
            let noise_seed = rng::derive_seed(params.seed, i as u64);
            let mut noise = sample_noise(noise_seed, params.shape)?;
            let mut converged = true;
            if params.purified {
                let r = purify(
                    &noise,
                    calibration,
                    params.min_confidence,
                    params.max_iters,
                    rng::derive_seed(noise_seed, rng::label_seed("purify")),
                )?;
                converged = r.converged;
                noise = r.noise;
            }
            let request = GenerationRequest::new(format!("noise-{i:05}"), prompts.clone())?;
            let response = backend
                .generate(&request, &noise)
                .map_err(|e| Error::BackendFailure(e.to_string()))?;
            let boxes = prompts
                .iter()
                .filter_map(|p| {
                    filter_best(
                        response.for_prompt(&p.id),
                        &p.class_name,
                        DIVERSITY_MIN_SCORE,
                    )
                })
                .map(|b| rescale_to_latent(b, request.image_size, params.shape.width as u32))
                .collect::<Result<Vec<_>>>()?;
            let entropy = if boxes.len() >= 2 {
                Some(trigger_entropy(&request.noise_id, &boxes)?.entropy)
            } else {
                None
            };
            Ok((entropy, converged))
        })
        .collect::<Result<_>>()?;
    let valid: Vec<f64> = per_noise.iter().filter_map(|(e, _)| *e).collect();
    if valid.is_empty() {
        return Err(Error::BackendFailure(
            "no noise produced two or more boxes".into(),
        ));
    }
    Ok(DiversityReport {
        purified: params.purified,
        n_seeds: params.n_seeds,
        mean_entropy: valid.iter().sum::<f64>() / valid.len() as f64,
        entropies: per_noise.iter().map(|(e, _)| *e).collect(),
        not_converged: per_noise.iter().filter(|(_, c)| !c).count(),
    })
}
