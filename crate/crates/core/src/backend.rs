//! Generation backends: given a noise and prompts, report where objects appeared.
//!
//! [`SyntheticBackend`] stands in for a diffusion model plus object detector. It
//! places every object on the strongest outlier window when one is present and
//! uniformly at random otherwise. [`ExternalBackend`] drives a real pipeline
//! through a directory-based file protocol.

use std::collections::HashSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{BBoxAnnotation, Prompt, Space};
use crate::detector::{windows, NullCalibration, WindowScorer};
use crate::error::{Error, Result};
use crate::metrics::random_span;
use crate::npy;
use crate::rng;
use crate::tensor::{LatentTensor, Region};

pub const NOISE_FILE: &str = "noise.npy";
pub const REQUEST_FILE: &str = "request.json";
pub const RESPONSE_FILE: &str = "response.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub noise_id: String,
    #[serde(default = "default_noise_file")]
    pub noise_file: String,
    #[serde(default = "default_image_size")]
    pub image_size: u32,
    pub prompts: Vec<Prompt>,
}

fn default_noise_file() -> String {
    NOISE_FILE.to_owned()
}

fn default_image_size() -> u32 {
    512
}

impl GenerationRequest {
    pub fn new(noise_id: impl Into<String>, prompts: Vec<Prompt>) -> Result<Self> {
        let req = GenerationRequest {
            noise_id: noise_id.into(),
            noise_file: default_noise_file(),
            image_size: default_image_size(),
            prompts,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::EmptyInput("generation request has no prompts"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub noise_id: String,
    pub backend: String,
    /// Image-space boxes; each carries the prompt it answers.
    pub annotations: Vec<BBoxAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    /// Free-form generation settings reported by the backend.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl GenerationResponse {
    pub fn for_prompt<'a>(
        &'a self,
        prompt_id: &'a str,
    ) -> impl Iterator<Item = &'a BBoxAnnotation> + 'a {
        self.annotations
            .iter()
            .filter(move |a| a.prompt_id == prompt_id)
    }

    /// Checks boxes are well formed, image-space and answer prompts of `request`.
    pub fn validate_against(&self, request: &GenerationRequest) -> Result<()> {
        if self.noise_id != request.noise_id {
            return Err(Error::SchemaViolation(format!(
                "response is for noise `{}`, request was `{}`",
                self.noise_id, request.noise_id
            )));
        }
        let ids: HashSet<&str> = request.prompts.iter().map(|p| p.id.as_str()).collect();
        for a in &self.annotations {
            a.validate()?;
            if a.space != Space::Image {
                return Err(Error::SchemaViolation(
                    "response boxes must be in image space".into(),
                ));
            }
            if !ids.contains(a.prompt_id.as_str()) {
                return Err(Error::SchemaViolation(format!(
                    "annotation references unknown prompt `{}`",
                    a.prompt_id
                )));
            }
        }
        Ok(())
    }
}

pub trait Backend: Sync {
    fn name(&self) -> &str;
    fn generate(
        &self,
        request: &GenerationRequest,
        noise: &LatentTensor,
    ) -> Result<GenerationResponse>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    /// Objects gather on the top window when its null confidence reaches this level.
    pub spawn_quantile: f64,
    /// Largest per-axis offset of a box center from the refined window center.
    pub jitter: u32,
    /// Radius of the stride-1 search around the best grid window.
    pub refine_radius: usize,
    pub min_score: f64,
    pub max_score: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            spawn_quantile: 0.99,
            jitter: 1,
            refine_radius: 3,
            min_score: 0.8,
            max_score: 1.0,
            seed: 0,
        }
    }
}

/// Box width and height in latent cells for a class.
pub fn class_box_size(class_name: &str) -> (f64, f64) {
    let h = rng::label_seed(class_name);
    (22.0 + (h % 2) as f64, 22.0)
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    calibration: NullCalibration,
    params: SyntheticParams,
}

/// Where the synthetic backend decided to put objects for one noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Center of the refined top window, latent cells.
    Trigger {
        cx: f64,
        cy: f64,
        confidence: f64,
    },
    Dispersed {
        confidence: f64,
    },
}

impl SyntheticBackend {
    /// The calibration's statistic decides which window score drives spawning.
    pub fn new(calibration: NullCalibration, params: SyntheticParams) -> Result<Self> {
        calibration.validate()?;
        if !(params.min_score <= params.max_score
            && (0.0..=1.0).contains(&params.min_score)
            && params.max_score <= 1.0)
        {
            return Err(Error::InvalidArgument(
                "score range must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&params.spawn_quantile) {
            return Err(Error::InvalidArgument(
                "spawn quantile must lie in [0, 1]".into(),
            ));
        }
        Ok(SyntheticBackend {
            calibration,
            params,
        })
    }

    pub fn calibration(&self) -> &NullCalibration {
        &self.calibration
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    pub fn placement(&self, noise: &LatentTensor) -> Placement {
        let calib = &self.calibration;
        let shape = noise.shape();
        let scorer = WindowScorer::new(noise);
        let grid = windows(&shape, calib.window, calib.stride);
        let best = |regions: &mut dyn Iterator<Item = Region>| {
            regions
                .map(|r| (scorer.score(&r, calib.statistic), r))
                .fold(None, |acc: Option<(f64, Region)>, (s, r)| match acc {
                    Some((bs, _)) if bs >= s => acc,
                    _ => Some((s, r)),
                })
        };
        let Some((score, top)) = best(&mut grid.into_iter()) else {
            return Placement::Dispersed { confidence: 0.0 };
        };
        let confidence = calib.confidence(score);
        if confidence < self.params.spawn_quantile {
            return Placement::Dispersed { confidence };
        }
        let rad = self.params.refine_radius;
        let w = calib.window;
        let span = |lo: usize, len: usize| lo.saturating_sub(rad)..=(lo + rad).min(len - w);
        let mut local = span(top.y1, shape.height).flat_map(|y| {
            span(top.x1, shape.width).map(move |x| Region {
                x1: x,
                y1: y,
                x2: x + w,
                y2: y + w,
            })
        });
        let (_, refined) = best(&mut local).unwrap_or((score, top));
        let (cx, cy) = refined.center();
        Placement::Trigger { cx, cy, confidence }
    }

    fn prompt_rng(&self, noise_id: &str, prompt_id: &str) -> rand_chacha::ChaCha8Rng {
        let base = rng::derive_seed(self.params.seed, rng::label_seed(noise_id));
        rng::chacha(rng::derive_seed(base, rng::label_seed(prompt_id)))
    }
}

/// Box of size `(w, h)` centered at `(cx, cy)`, half-extents shrunk symmetrically
/// so the box stays inside `[0, side]` without moving its center.
fn centered_box(cx: f64, cy: f64, w: f64, h: f64, side: f64) -> (f64, f64, f64, f64) {
    let hw = (w / 2.0).min(cx).min(side - cx);
    let hh = (h / 2.0).min(cy).min(side - cy);
    (cx - hw, cy - hh, cx + hw, cy + hh)
}

pub fn synthetic_generate(
    backend: &SyntheticBackend,
    request: &GenerationRequest,
    noise: &LatentTensor,
) -> Result<GenerationResponse> {
    request.validate()?;
    let shape = noise.shape();
    if shape.width != shape.height || !(request.image_size as usize).is_multiple_of(shape.width) {
        return Err(Error::InvalidArgument(format!(
            "image size {} is not a multiple of a square latent {}",
            request.image_size, shape
        )));
    }
    let scale = f64::from(request.image_size) / shape.width as f64;
    let side = shape.width as f64;
    let placement = backend.placement(noise);
    let jitter = i64::from(backend.params.jitter);
    let annotations = request
        .prompts
        .iter()
        .map(|p| {
            let mut rng = backend.prompt_rng(&request.noise_id, &p.id);
            let (cx, cy) = match placement {
                Placement::Trigger { cx, cy, .. } => (
                    (cx + rng.random_range(-jitter..=jitter) as f64).clamp(0.5, side - 0.5),
                    (cy + rng.random_range(-jitter..=jitter) as f64).clamp(0.5, side - 0.5),
                ),
                Placement::Dispersed { .. } => {
                    let (x1, x2) = random_span(&mut rng, request.image_size);
                    let (y1, y2) = random_span(&mut rng, request.image_size);
                    (
                        f64::from(x1 + x2) / 2.0 / scale,
                        f64::from(y1 + y2) / 2.0 / scale,
                    )
                }
            };
            let (w, h) = class_box_size(&p.class_name);
            let (x1, y1, x2, y2) = centered_box(cx, cy, w, h, side);
            let score = rng.random_range(backend.params.min_score..=backend.params.max_score);
            BBoxAnnotation {
                x1: x1 * scale,
                y1: y1 * scale,
                x2: x2 * scale,
                y2: y2 * scale,
                class_name: p.class_name.clone(),
                score,
                prompt_id: p.id.clone(),
                space: Space::Image,
            }
        })
        .collect();
    Ok(GenerationResponse {
        noise_id: request.noise_id.clone(),
        backend: backend.name().to_owned(),
        annotations,
        wall_time_ms: None,
        metadata: serde_json::Value::Null,
    })
}

impl Backend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn generate(
        &self,
        request: &GenerationRequest,
        noise: &LatentTensor,
    ) -> Result<GenerationResponse> {
        synthetic_generate(self, request, noise)
    }
}

/// Runs `command <request_dir>` once per noise, each in its own directory.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub command: Vec<String>,
    pub work_dir: PathBuf,
    pub timeout: Duration,
}

impl ExternalBackend {
    pub fn new(
        command: Vec<String>,
        work_dir: impl Into<PathBuf>,
        timeout: Duration,
    ) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::InvalidArgument("adapter command is empty".into()));
        }
        Ok(ExternalBackend {
            command,
            work_dir: work_dir.into(),
            timeout,
        })
    }

    pub fn request_dir(&self, noise_id: &str) -> PathBuf {
        let safe: String = noise_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        self.work_dir.join(safe)
    }
}

impl Backend for ExternalBackend {
    fn name(&self) -> &str {
        "external"
    }

    fn generate(
        &self,
        request: &GenerationRequest,
        noise: &LatentTensor,
    ) -> Result<GenerationResponse> {
        external_generate(
            &self.request_dir(&request.noise_id),
            request,
            noise,
            &self.command,
            self.timeout,
        )
    }
}

/// Writes the request into `request_dir`, runs the adapter with the directory
/// as its last argument and reads back a validated response.
///
/// On timeout the adapter is killed and the directory is left as is.
pub fn external_generate(
    request_dir: &Path,
    request: &GenerationRequest,
    noise: &LatentTensor,
    command: &[String],
    timeout: Duration,
) -> Result<GenerationResponse> {
    request.validate()?;
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("adapter command is empty".into()))?;
    fs::create_dir_all(request_dir).map_err(|e| Error::io(request_dir, e))?;
    let response_path = request_dir.join(RESPONSE_FILE);
    if response_path.exists() {
        fs::remove_file(&response_path).map_err(|e| Error::io(&response_path, e))?;
    }
    npy::write_tensor(request_dir.join(&request.noise_file), noise)?;
    let request_path = request_dir.join(REQUEST_FILE);
    fs::write(&request_path, serde_json::to_string_pretty(request)? + "\n")
        .map_err(|e| Error::io(&request_path, e))?;

    let log = |name: &str| -> Result<File> {
        let p = request_dir.join(name);
        File::create(&p).map_err(|e| Error::io(p, e))
    };
    let started = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .arg(request_dir)
        .stdin(Stdio::null())
        .stdout(log("adapter.stdout")?)
        .stderr(log("adapter.stderr")?)
        .spawn()
        .map_err(|e| Error::BackendFailure(format!("cannot start adapter `{program}`: {e}")))?;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if started.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Timeout(timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(Error::BackendFailure(format!("waiting for adapter: {e}"))),
        }
    };
    let wall = started.elapsed();
    if !status.success() {
        return Err(Error::AdapterExit(status.code().unwrap_or(-1)));
    }
    let text = fs::read_to_string(&response_path).map_err(|e| Error::io(&response_path, e))?;
    let mut response: GenerationResponse = serde_json::from_str(&text)
        .map_err(|e| Error::SchemaViolation(format!("{}: {e}", response_path.display())))?;
    response.validate_against(request)?;
    response
        .wall_time_ms
        .get_or_insert(wall.as_secs_f64() * 1e3);
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{dataset_prompts, rescale_to_latent};
    use crate::detector::calibrate_null;
    use crate::metrics::{random_baseline_expectation, trigger_entropy};
    use crate::synth::{synth_shifted_gaussian, ShiftedGaussianSpec};
    use crate::tensor::{inject_patch, sample_noise, Shape};
    use std::sync::OnceLock;

    fn backend() -> &'static SyntheticBackend {
        static B: OnceLock<SyntheticBackend> = OnceLock::new();
        B.get_or_init(|| {
            SyntheticBackend::new(
                calibrate_null(24, 4, 200, 77).unwrap(),
                SyntheticParams::default(),
            )
            .unwrap()
        })
    }

    fn latent(resp: &GenerationResponse) -> Vec<BBoxAnnotation> {
        resp.annotations
            .iter()
            .map(|a| rescale_to_latent(a, 512, 64).unwrap())
            .collect()
    }

    fn injected(seed: u64, region: Region) -> LatentTensor {
        let patch = synth_shifted_gaussian(
            &ShiftedGaussianSpec::new(1.5, 0.0).unwrap(),
            region,
            4,
            seed ^ 1,
        )
        .unwrap();
        inject_patch(
            &sample_noise(seed, Shape::default()).unwrap(),
            &patch,
            &region,
        )
        .unwrap()
    }

    #[test]
    fn injected_patch_gathers_every_box() {
        let region = Region::new(30, 8, 54, 32).unwrap();
        let noise = injected(5, region);
        let req = GenerationRequest::new("n5", dataset_prompts()).unwrap();
        let resp = backend().generate(&req, &noise).unwrap();
        assert_eq!(resp.annotations.len(), 25);
        resp.validate_against(&req).unwrap();
        let boxes = latent(&resp);
        for b in &boxes {
            let (cx, cy) = b.center();
            assert!(
                (28.0..=56.0).contains(&cx) && (6.0..=34.0).contains(&cy),
                "{cx},{cy}"
            );
            assert!((0.8..=1.0).contains(&b.score));
        }
        assert!(trigger_entropy("n5", &boxes).unwrap().entropy <= 8.0);
        assert_eq!(resp, backend().generate(&req, &noise).unwrap());
    }

    #[test]
    fn pure_noise_entropy_tracks_the_random_baseline() {
        let prompts = dataset_prompts();
        let entropies: Vec<f64> = (0..500u64)
            .filter_map(|i| {
                let noise = sample_noise(rng::derive_seed(40, i), Shape::default()).unwrap();
                if matches!(backend().placement(&noise), Placement::Trigger { .. }) {
                    return None;
                }
                let req = GenerationRequest::new(format!("p{i}"), prompts.clone()).unwrap();
                let boxes = latent(&backend().generate(&req, &noise).unwrap());
                Some(trigger_entropy("p", &boxes).unwrap().entropy)
            })
            .collect();
        assert!(entropies.len() > 100);
        let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
        let expected = random_baseline_expectation(25, 64.0);
        assert!((mean / expected - 1.0).abs() < 0.10, "{mean} vs {expected}");
    }

    #[test]
    fn injection_only_matters_past_the_spawn_threshold() {
        let region = Region::new(8, 8, 32, 32).unwrap();
        let req = GenerationRequest::new("m", dataset_prompts()).unwrap();
        for seed in 0..40u64 {
            let plain = sample_noise(seed, Shape::default()).unwrap();
            // A unit-variance patch rarely crosses the threshold; when neither does, outputs agree.
            let weak = {
                let patch = synth_shifted_gaussian(
                    &ShiftedGaussianSpec::new(1.0, 0.0).unwrap(),
                    region,
                    4,
                    seed + 100,
                )
                .unwrap();
                inject_patch(&plain, &patch, &region).unwrap()
            };
            let (a, b) = (backend().placement(&plain), backend().placement(&weak));
            if matches!(a, Placement::Dispersed { .. }) && matches!(b, Placement::Dispersed { .. })
            {
                assert_eq!(
                    backend().generate(&req, &plain).unwrap(),
                    backend().generate(&req, &weak).unwrap()
                );
            }
        }
    }

    #[test]
    fn box_sizes_and_clipping() {
        assert_eq!(
            centered_box(1.0, 32.0, 22.0, 22.0, 64.0),
            (0.0, 21.0, 2.0, 43.0)
        );
        for p in dataset_prompts() {
            let (w, h) = class_box_size(&p.class_name);
            assert!((22.0..=23.0).contains(&w) && h == 22.0);
        }
    }

    #[test]
    fn request_needs_prompts() {
        assert!(matches!(
            GenerationRequest::new("x", vec![]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[cfg(unix)]
    mod external {
        use super::*;
        use std::os::unix::fs::PermissionsExt;

        fn script(dir: &Path, body: &str) -> Vec<String> {
            let path = dir.join("adapter.sh");
            fs::write(&path, format!("#!/bin/sh\nset -e\n{body}\n")).unwrap();
            fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
            vec![path.display().to_string()]
        }

        fn request() -> (GenerationRequest, LatentTensor) {
            let prompts = dataset_prompts().into_iter().take(3).collect();
            (
                GenerationRequest::new("ext-1", prompts).unwrap(),
                sample_noise(1, Shape::default()).unwrap(),
            )
        }

        const ECHO: &str = r#"d="$1"
test -f "$d/noise.npy"
ids=$(sed -n 's/.*"id": "\([^"]*\)".*/\1/p' "$d/request.json")
out='{"noise_id":"ext-1","backend":"stub","annotations":['
sep=''
for id in $ids; do
  out="$out$sep{\"x1\":8,\"y1\":8,\"x2\":200,\"y2\":200,\"class\":\"c\",\"score\":0.9,\"prompt_id\":\"$id\",\"space\":\"image\"}"
  sep=','
done
echo "$out]}" > "$d/response.json""#;

        #[test]
        fn echo_adapter_round_trip() {
            let tmp = tempfile::tempdir().unwrap();
            let cmd = script(tmp.path(), ECHO);
            let (req, noise) = request();
            let dir = tmp.path().join("req");
            let resp =
                external_generate(&dir, &req, &noise, &cmd, Duration::from_secs(20)).unwrap();
            assert_eq!(resp.annotations.len(), 3);
            assert_eq!(resp.backend, "stub");
            assert!(resp.wall_time_ms.is_some());
            assert_eq!(npy::read_tensor(dir.join(NOISE_FILE)).unwrap(), noise);
            let echoed: GenerationRequest =
                serde_json::from_str(&fs::read_to_string(dir.join(REQUEST_FILE)).unwrap()).unwrap();
            assert_eq!(echoed, req);
        }

        #[test]
        fn malformed_response_is_a_schema_violation() {
            let tmp = tempfile::tempdir().unwrap();
            let cmd = script(
                tmp.path(),
                r#"echo '{"noise_id": "ext-1", "annot' > "$1/response.json""#,
            );
            let (req, noise) = request();
            let err = external_generate(
                &tmp.path().join("r"),
                &req,
                &noise,
                &cmd,
                Duration::from_secs(20),
            );
            assert!(matches!(err, Err(Error::SchemaViolation(_))), "{err:?}");
        }

        #[test]
        fn unknown_prompt_is_rejected() {
            let tmp = tempfile::tempdir().unwrap();
            let cmd = script(
                tmp.path(),
                r#"echo '{"noise_id":"ext-1","backend":"s","annotations":[{"x1":0,"y1":0,"x2":8,"y2":8,"class":"c","score":0.9,"prompt_id":"nope","space":"image"}]}' > "$1/response.json""#,
            );
            let (req, noise) = request();
            let err = external_generate(
                &tmp.path().join("r"),
                &req,
                &noise,
                &cmd,
                Duration::from_secs(20),
            );
            assert!(matches!(err, Err(Error::SchemaViolation(m)) if m.contains("nope")));
        }

        #[test]
        fn nonzero_exit() {
            let tmp = tempfile::tempdir().unwrap();
            let cmd = script(tmp.path(), "exit 3");
            let (req, noise) = request();
            let err = external_generate(
                &tmp.path().join("r"),
                &req,
                &noise,
                &cmd,
                Duration::from_secs(20),
            );
            assert!(matches!(err, Err(Error::AdapterExit(3))));
        }

        #[test]
        fn timeout_kills_and_leaves_files() {
            let tmp = tempfile::tempdir().unwrap();
            let cmd = script(tmp.path(), "exec sleep 30");
            let (req, noise) = request();
            let dir = tmp.path().join("r");
            let started = Instant::now();
            let err = external_generate(&dir, &req, &noise, &cmd, Duration::from_millis(200));
            assert!(matches!(err, Err(Error::Timeout(_))));
            assert!(started.elapsed() < Duration::from_secs(10));
            assert!(dir.join(NOISE_FILE).exists() && dir.join(REQUEST_FILE).exists());
        }

        #[test]
        fn backend_uses_one_directory_per_noise() {
            let tmp = tempfile::tempdir().unwrap();
            let cmd = script(tmp.path(), ECHO);
            let b = ExternalBackend::new(cmd, tmp.path().join("work"), Duration::from_secs(20))
                .unwrap();
            let (req, noise) = request();
            b.generate(&req, &noise).unwrap();
            assert!(tmp.path().join("work/ext-1/response.json").exists());
            assert_eq!(b.request_dir("a/b c"), tmp.path().join("work/a_b_c"));
        }
    }
}
