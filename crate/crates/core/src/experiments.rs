//! Seeded end-to-end studies over a backend: injection success, guidance
//! success, detector mAP on a generated dataset, and a fixture for the
//! entropy-decile analysis.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    dataset_prompts, filter_best, guidance_prompts, prompt_map, rescale_to_latent, BBoxAnnotation,
    DatasetManifest, NoiseRecord, Prompt, Space,
};
use crate::backend::{Backend, GenerationRequest};
use crate::detector::NullCalibration;
use crate::detector::{map50, BoxF, EvalImage, ScoredBox};
use crate::error::{Error, Result};
use crate::metrics::{coverage, injection_success, judge_position, Side};
use crate::rng;
use crate::sampling::{align, AlignParams, AlignTarget};
use crate::synth::{synth_shifted_gaussian, synth_sine_patch, ShiftedGaussianSpec, SinePatchSpec};
use crate::tensor::{
    extract_patch, inject_patch, resample_region, sample_noise, LatentTensor, Region, Shape,
};

/// Score threshold for keeping a backend box.
pub const MIN_BOX_SCORE: f64 = 0.75;

/// What gets written into the target region of each host noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InjectionSource {
    ShiftedGaussian {
        std: f64,
        mean: f64,
    },
    /// Sine lattice blended into the host's own slab.
    Sine {
        theta: f64,
    },
    /// Host slab redrawn with its own mean and variance.
    Resampling,
    /// A random window of an unrelated noise.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsrParams {
    pub trials: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub source: InjectionSource,
    pub shape: Shape,
}

impl Default for IsrParams {
    fn default() -> Self {
        IsrParams {
            trials: 200,
            patch_size: 24,
            seed: 0,
            source: InjectionSource::ShiftedGaussian {
                std: 1.5,
                mean: 0.0,
            },
            shape: Shape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsrCase {
    pub trial: usize,
    pub prompt_id: String,
    pub trigger: Region,
    /// Best latent box for the prompt, if any scored above 0.75.
    pub detected: Option<BBoxAnnotation>,
    pub coverage: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsrReport {
    pub source: InjectionSource,
    pub trials: usize,
    pub successes: usize,
    pub isr: f64,
    pub cases: Vec<IsrCase>,
}

fn random_region(rng: &mut impl Rng, size: usize, shape: &Shape) -> Region {
    let x = rng.random_range(0..=shape.width - size);
    let y = rng.random_range(0..=shape.height - size);
    Region {
        x1: x,
        y1: y,
        x2: x + size,
        y2: y + size,
    }
}

/// Builds the noise for one injection trial and the region it targets.
pub fn injection_trial(params: &IsrParams, trial: usize) -> Result<(LatentTensor, Region)> {
    let shape = params.shape;
    if params.patch_size == 0 || params.patch_size > shape.width.min(shape.height) {
        return Err(Error::InvalidArgument(format!(
            "patch size {} does not fit {shape}",
            params.patch_size
        )));
    }
    let t = trial as u64;
    let stream =
        |label: &str| rng::derive_seed(rng::derive_seed(params.seed, rng::label_seed(label)), t);
    let host = sample_noise(stream("host"), shape)?;
    let mut pick = rng::chacha(stream("position"));
    let region = random_region(&mut pick, params.patch_size, &shape);
    let noise = match params.source {
        InjectionSource::ShiftedGaussian { std, mean } => {
            let spec = ShiftedGaussianSpec::new(std, mean)?;
            let patch = synth_shifted_gaussian(&spec, region, shape.channels, stream("patch"))?;
            inject_patch(&host, &patch, &region)?
        }
        InjectionSource::Sine { theta } => {
            let base = extract_patch(&host, &region)?;
            let patch = synth_sine_patch(&base, &SinePatchSpec::with_theta(theta)?)?;
            inject_patch(&host, &patch, &region)?
        }
        InjectionSource::Resampling => resample_region(&host, &region, stream("patch"), true)?,
        InjectionSource::Random => {
            let source = sample_noise(stream("source"), shape)?;
            let from = random_region(&mut pick, params.patch_size, &shape);
            let patch = extract_patch(&source, &from)?.relocated(region)?;
            inject_patch(&host, &patch, &region)?
        }
    };
    Ok((noise, region))
}

fn best_latent_box(
    backend: &dyn Backend,
    noise_id: String,
    noise: &LatentTensor,
    prompt: &Prompt,
) -> Result<Option<BBoxAnnotation>> {
    let request = GenerationRequest::new(noise_id, vec![prompt.clone()])?;
    let response = backend.generate(&request, noise)?;
    filter_best(
        response.for_prompt(&prompt.id),
        &prompt.class_name,
        MIN_BOX_SCORE,
    )
    .map(|b| match b.space {
        Space::Latent => Ok(b.clone()),
        Space::Image => rescale_to_latent(b, request.image_size, noise.shape().width as u32),
    })
    .transpose()
}

/// Injection success rate: one host noise and one dataset prompt per trial.
pub fn simulate_isr(backend: &dyn Backend, params: &IsrParams) -> Result<IsrReport> {
    if params.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let prompts = dataset_prompts();
    let cases: Vec<IsrCase> = (0..params.trials)
        .into_par_iter()
        .map(|t| {
            let (noise, trigger) = injection_trial(params, t)?;
            let prompt = &prompts[t % prompts.len()];
            let detected = best_latent_box(backend, format!("isr-{t:05}"), &noise, prompt)?;
            let (cov, success) = match &detected {
                Some(d) => (coverage(&trigger, d)?, injection_success(&trigger, d)?),
                None => (0.0, false),
            };
            Ok(IsrCase {
                trial: t,
                prompt_id: prompt.id.clone(),
                trigger,
                detected,
                coverage: cov,
                success,
            })
        })
        .collect::<Result<_>>()?;
    let successes = cases.iter().filter(|c| c.success).count();
    Ok(IsrReport {
        source: params.source,
        trials: params.trials,
        successes,
        isr: successes as f64 / params.trials as f64,
        cases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsrParams {
    pub trials: usize,
    pub seed: u64,
    /// Reject-sample each noise toward the prompted side first.
    pub align: Option<AlignParams>,
    pub shape: Shape,
}

impl Default for GsrParams {
    fn default() -> Self {
        GsrParams {
            trials: 500,
            seed: 0,
            align: None,
            shape: Shape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsrReport {
    pub side: Side,
    pub aligned: bool,
    pub trials: usize,
    pub hits: usize,
    pub gsr: f64,
    pub align_failures: usize,
    pub mean_attempts: f64,
}

/// Guidance success rate for positional prompts on one side.
pub fn simulate_gsr(
    backend: &dyn Backend,
    calibration: &NullCalibration,
    side: Side,
    params: &GsrParams,
) -> Result<GsrReport> {
    if params.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let prompts = guidance_prompts(side);
    let outcomes: Vec<(bool, usize, bool)> = (0..params.trials)
        .into_par_iter()
        .map(|t| {
            let seed = rng::derive_seed(params.seed, t as u64);
            let (noise, attempts, ok) = match &params.align {
                Some(a) => {
                    let r = align(AlignTarget::Side(side), calibration, a, seed)?;
                    (r.noise, r.attempts, r.success)
                }
                None => (sample_noise(seed, params.shape)?, 1, true),
            };
            let prompt = &prompts[t % prompts.len()];
            let found = best_latent_box(
                backend,
                format!("gsr-{}-{t:05}", side.name()),
                &noise,
                prompt,
            )?;
            let hit = match &found {
                Some(b) => judge_position(b, side, noise.shape().width)?,
                None => false,
            };
            Ok((hit, attempts, ok))
        })
        .collect::<Result<_>>()?;
    let hits = outcomes.iter().filter(|o| o.0).count();
    Ok(GsrReport {
        side,
        aligned: params.align.is_some(),
        trials: params.trials,
        hits,
        gsr: hits as f64 / params.trials as f64,
        align_failures: outcomes.iter().filter(|o| !o.2).count(),
        mean_attempts: outcomes.iter().map(|o| o.1 as f64).sum::<f64>() / params.trials as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_noises: usize,
    /// Every `inject_every`-th noise receives a shifted-Gaussian patch; 0 disables.
    pub inject_every: usize,
    pub inject_std: f64,
    pub seed: u64,
    pub shape: Shape,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_noises: 200,
            inject_every: 2,
            inject_std: 1.5,
            seed: 0,
            shape: Shape::default(),
        }
    }
}

/// Noises plus, for each, the best box per dataset prompt the backend reported.
pub fn synthetic_dataset(
    backend: &dyn Backend,
    params: &DatasetParams,
) -> Result<(DatasetManifest, BTreeMap<String, LatentTensor>)> {
    let prompts = dataset_prompts();
    let isr = IsrParams {
        trials: params.n_noises,
        seed: params.seed,
        source: InjectionSource::ShiftedGaussian {
            std: params.inject_std,
            mean: 0.0,
        },
        shape: params.shape,
        ..Default::default()
    };
    let rows: Vec<(NoiseRecord, LatentTensor)> = (0..params.n_noises)
        .into_par_iter()
        .map(|i| {
            let noise_id = format!("noise-{i:05}");
            let seed = rng::derive_seed(params.seed, i as u64);
            let noise = if params.inject_every > 0 && i % params.inject_every == 0 {
                injection_trial(&isr, i)?.0
            } else {
                sample_noise(seed, params.shape)?
            };
            let request = GenerationRequest::new(noise_id.clone(), prompts.clone())?;
            let response = backend.generate(&request, &noise)?;
            let annotations = prompts
                .iter()
                .filter_map(|p| {
                    filter_best(response.for_prompt(&p.id), &p.class_name, MIN_BOX_SCORE)
                })
                .cloned()
                .collect();
            Ok((
                NoiseRecord {
                    noise_id,
                    seed: Some(seed),
                    annotations,
                },
                noise,
            ))
        })
        .collect::<Result<_>>()?;
    let mut noises = BTreeMap::new();
    let mut records = Vec::with_capacity(rows.len());
    for (record, noise) in rows {
        noises.insert(record.noise_id.clone(), noise);
        records.push(record);
    }
    let manifest = DatasetManifest {
        image_size: 512,
        latent_size: params.shape.width as u32,
        prompts: prompt_map(&prompts),
        records,
    };
    Ok((manifest, noises))
}

/// mAP50 of per-noise detections against the manifest's boxes (in latent cells).
pub fn map50_against(
    manifest: &DatasetManifest,
    detections: &BTreeMap<String, Vec<ScoredBox>>,
) -> Result<f64> {
    let images = manifest
        .records
        .iter()
        .map(|r| {
            Ok(EvalImage {
                detections: detections.get(&r.noise_id).cloned().unwrap_or_default(),
                ground_truth: manifest.latent_boxes(r)?.iter().map(BoxF::from).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(map50(&images))
}

/// A manifest whose records fall into `groups` entropy bands. Band `g` has box
/// centers spread uniformly within `2 + 3g` cells of a cluster point, and a
/// 24x24 patch of standard deviation falling linearly from 1.5 (first band) to
/// 1.0 (last band) at that point.
pub fn decile_fixture(
    per_group: usize,
    groups: usize,
    seed: u64,
) -> Result<(DatasetManifest, HashMap<String, LatentTensor>)> {
    if groups < 2 || per_group == 0 {
        return Err(Error::InvalidArgument(
            "need at least 2 groups and 1 record each".into(),
        ));
    }
    let shape = Shape::default();
    let prompts = dataset_prompts();
    let mut records = Vec::new();
    let mut noises = HashMap::new();
    for g in 0..groups {
        let std = 1.5 - 0.5 * g as f64 / (groups - 1) as f64;
        let spread = 2.0 + 3.0 * g as f64;
        for k in 0..per_group {
            let id = format!("g{g:02}-{k:04}");
            let s = rng::derive_seed(seed, rng::label_seed(&id));
            let mut rng = rng::chacha(s);
            let (cx, cy) = (
                rng.random_range(12..=52usize),
                rng.random_range(12..=52usize),
            );
            let region = Region::new(cx - 12, cy - 12, cx + 12, cy + 12)?;
            let patch = synth_shifted_gaussian(
                &ShiftedGaussianSpec::new(std, 0.0)?,
                region,
                shape.channels,
                s ^ 1,
            )?;
            let noise = inject_patch(&sample_noise(s, shape)?, &patch, &region)?;
            // Offsets are symmetric around the cluster point so the mean center stays close to it.
            let annotations = prompts
                .iter()
                .map(|p| {
                    let ox = rng.random_range(-spread..=spread);
                    let oy = rng.random_range(-spread..=spread);
                    let x = (cx as f64 + ox).clamp(1.0, 63.0);
                    let y = (cy as f64 + oy).clamp(1.0, 63.0);
                    BBoxAnnotation {
                        x1: (x - 1.0) * 8.0,
                        y1: (y - 1.0) * 8.0,
                        x2: (x + 1.0) * 8.0,
                        y2: (y + 1.0) * 8.0,
                        class_name: p.class_name.clone(),
                        score: 0.9,
                        prompt_id: p.id.clone(),
                        space: Space::Image,
                    }
                })
                .collect();
            records.push(NoiseRecord {
                noise_id: id.clone(),
                seed: Some(s),
                annotations,
            });
            noises.insert(id, noise);
        }
    }
    Ok((
        DatasetManifest {
            records,
            ..Default::default()
        },
        noises,
    ))
}
