use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use triggerlab::annotations::{
    filter_best, permute_annotations, rescale_to_latent, restrict_to_class, Space,
};
use triggerlab::backend::{Backend, ExternalBackend, SyntheticBackend, SyntheticParams};
use triggerlab::detector::{
    calibrate, detect, load_detections, CalibrationConfig, NoiseDetections, NullCalibration,
    ScoredBox, WindowStatistic,
};
use triggerlab::experiments::{self, DatasetParams, GsrParams, InjectionSource, IsrParams};
use triggerlab::metrics::{self, heatmap, isr, trigger_entropy, InjectionCase};
use triggerlab::sampling::{self, AlignParams, AlignTarget, DiversityParams};
use triggerlab::stats::{self, DecileParams, NoiseDir};
use triggerlab::synth::{
    synth_shifted_gaussian, synth_sine_patch, ShiftedGaussianSpec, SinePatchSpec,
};
use triggerlab::tensor::{extract_patch, inject_patch, resample_region, sample_noise};
use triggerlab::{npy, rng, BBoxAnnotation, DatasetManifest, Patch, Region, Shape};

use crate::{
    AdapterArgs, BaselineArg, CalibArgs, Cli, Command, DatasetCommand, EvaluateCommand, PatchKind,
    StatisticArg,
};

fn stream(seed: u64, label: &str) -> u64 {
    rng::derive_seed(seed, rng::label_seed(label))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    ensure_parent(path)?;
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    jobs: Option<usize>,
    config: &'a Command,
}

fn primary_output(command: &Command) -> &Path {
    match command {
        Command::Sample { out, .. }
        | Command::Inject { out, .. }
        | Command::Resample { out, .. }
        | Command::SynthPatch { out, .. }
        | Command::Entropy { out, .. }
        | Command::Heatmap { out, .. }
        | Command::EnergyTest { out, .. }
        | Command::DecileAnalysis { out, .. }
        | Command::Calibrate { out, .. }
        | Command::Detect { out, .. }
        | Command::Purify { out, .. }
        | Command::Align { out, .. } => out,
        Command::Simulate { report, .. } => report,
        Command::Evaluate(e) => match e {
            EvaluateCommand::Isr { out, .. } | EvaluateCommand::Map50 { out, .. } => out,
            EvaluateCommand::Gsr { report, .. } | EvaluateCommand::Diversity { report, .. } => {
                report
            }
        },
        Command::Dataset(d) => match d {
            DatasetCommand::Rescale { out, .. }
            | DatasetCommand::Filter { out, .. }
            | DatasetCommand::Permute { out, .. } => out,
            DatasetCommand::Synth { out_dir, .. } => out_dir,
        },
    }
}

fn run_json_path(cli: &Cli) -> PathBuf {
    if let Some(p) = &cli.run_json {
        return p.clone();
    }
    let out = primary_output(&cli.command);
    let dir = match &cli.command {
        Command::Dataset(DatasetCommand::Synth { .. }) => Some(out),
        _ => out.parent(),
    };
    dir.unwrap_or(Path::new("")).join("run.json")
}

pub fn run(cli: &Cli) -> Result<()> {
    let record = RunRecord {
        tool: "triggerlab",
        version: env!("CARGO_PKG_VERSION"),
        seed: cli.seed,
        jobs: cli.jobs,
        config: &cli.command,
    };
    write_json(&run_json_path(cli), &record)?;
    ensure_parent(primary_output(&cli.command))?;
    let seed = cli.seed;
    match &cli.command {
        Command::Sample { shape, out } => {
            let noise = sample_noise(seed, shape.shape())?;
            npy::write_tensor(out, &noise)?;
        }
        Command::Inject {
            noise,
            patch,
            x,
            y,
            out,
        } => {
            let host = npy::read_tensor(noise)?;
            let p = npy::read_tensor(patch)?;
            let s = p.shape();
            let region = Region::new(*x, *y, x + s.width, y + s.height)?;
            let patch = Patch::new(region, s.channels, p.into_data())?;
            npy::write_tensor(out, &inject_patch(&host, &patch, &region)?)?;
        }
        Command::Resample {
            noise,
            region,
            match_moments,
            out,
        } => {
            let host = npy::read_tensor(noise)?;
            npy::write_tensor(out, &resample_region(&host, region, seed, *match_moments)?)?;
        }
        Command::SynthPatch {
            kind,
            std,
            mean,
            theta,
            size,
            channels,
            base,
            x,
            y,
            out,
        } => {
            let region = Region::new(*x, *y, x + size, y + size)?;
            let patch = match kind {
                PatchKind::Shifted => synth_shifted_gaussian(
                    &ShiftedGaussianSpec::new(*std, *mean)?,
                    region,
                    *channels,
                    seed,
                )?,
                PatchKind::Sine => {
                    let base = match base {
                        Some(path) => extract_patch(&npy::read_tensor(path)?, &region)?,
                        None => synth_shifted_gaussian(
                            &ShiftedGaussianSpec::new(1.0, 0.0)?,
                            region,
                            *channels,
                            seed,
                        )?,
                    };
                    synth_sine_patch(&base, &SinePatchSpec::with_theta(*theta)?)?
                }
            };
            ensure_parent(out)?;
            npy::write_f32(
                out,
                &[patch.channels(), region.height(), region.width()],
                patch.data(),
            )?;
        }
        Command::Entropy { manifest, out } => entropy(manifest, out)?,
        Command::Heatmap {
            manifest,
            noise_id,
            out,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let record = m
                .record(noise_id)
                .with_context(|| format!("no record `{noise_id}`"))?;
            let side = m.latent_size as usize;
            let map = heatmap(&m.latent_boxes(record)?, side, side)?;
            ensure_parent(out)?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(out)?;
            for row in map.rows() {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        Command::EnergyTest { a, b, perms, out } => {
            let x = npy::read(a)?.rows()?;
            let y = npy::read(b)?.rows()?;
            write_json(out, &stats::permutation_test(&x, &y, *perms, seed)?)?;
        }
        Command::DecileAnalysis {
            manifest,
            noise_dir,
            groups,
            patch_size,
            perms,
            max_per_group,
            exclude_overlap,
            out,
            report,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let params = DecileParams {
                groups: *groups,
                patch_size: *patch_size,
                n_perms: *perms,
                seed,
                max_per_group: (*max_per_group > 0).then_some(*max_per_group),
                exclude_overlap: *exclude_overlap,
            };
            let analysis = stats::decile_analysis(&m, &NoiseDir(noise_dir.clone()), &params)?;
            #[derive(Serialize)]
            struct Row {
                decile: usize,
                entropy_lo: f64,
                entropy_hi: f64,
                #[serde(rename = "mean_E")]
                mean_e: f64,
                p: f64,
                records: usize,
                patches: usize,
            }
            write_csv(
                out,
                analysis.groups.iter().map(|g| Row {
                    decile: g.decile,
                    entropy_lo: g.entropy_lo,
                    entropy_hi: g.entropy_hi,
                    mean_e: g.mean_energy,
                    p: g.p_value,
                    records: g.records,
                    patches: g.patches,
                }),
            )?;
            if let Some(r) = report {
                write_json(r, &analysis)?;
            }
            eprintln!(
                "spearman rho {:.4} (p {:.4})",
                analysis.spearman_rho, analysis.spearman_p
            );
        }
        Command::Calibrate {
            window,
            stride,
            noises,
            statistic,
            shape,
            out,
        } => {
            let calib = calibrate(&CalibrationConfig {
                window: *window,
                stride: *stride,
                statistic: statistic_of(*statistic),
                shape: shape.shape(),
                n_noises: *noises,
                seed,
            })?;
            ensure_parent(out)?;
            calib.save(out)?;
        }
        Command::Detect {
            noise_dir,
            noise,
            calib,
            min_conf,
            nms_iou,
            out,
        } => {
            let calib = NullCalibration::load(calib)?;
            let files = match (noise_dir, noise) {
                (Some(dir), None) => npy_files(dir)?,
                (None, Some(f)) => vec![f.clone()],
                _ => bail!("pass exactly one of --noise-dir or --noise"),
            };
            let found: Vec<NoiseDetections> = files
                .par_iter()
                .map(|f| {
                    let tensor = npy::read_tensor(f)?;
                    Ok(NoiseDetections {
                        noise_id: file_stem(f),
                        boxes: detect(&tensor, &calib, *min_conf, *nms_iou)
                            .iter()
                            .map(ScoredBox::from)
                            .collect(),
                    })
                })
                .collect::<Result<_>>()?;
            write_json(out, &found)?;
        }
        Command::Purify {
            noise,
            calib,
            min_conf,
            max_iters,
            out,
            report,
        } => {
            let calib = load_calibration(calib, seed, WindowStatistic::Kl)?;
            let input = match noise {
                Some(p) => npy::read_tensor(p)?,
                None => sample_noise(seed, Shape::default())?,
            };
            let r = sampling::purify(
                &input,
                &calib,
                *min_conf,
                *max_iters,
                stream(seed, "purify"),
            )?;
            npy::write_tensor(out, &r.noise)?;
            if let Some(path) = report {
                #[derive(Serialize)]
                struct PurifyReport<'a> {
                    converged: bool,
                    iterations: usize,
                    regenerated: &'a [Vec<Region>],
                }
                write_json(
                    path,
                    &PurifyReport {
                        converged: r.converged,
                        iterations: r.iterations,
                        regenerated: &r.regenerated,
                    },
                )?;
            }
            if !r.converged {
                eprintln!("warning: detections remain after {} passes", r.iterations);
            }
        }
        Command::Align {
            side,
            region,
            calib,
            min_conf,
            max_attempts,
            out,
            report,
        } => {
            let calib = load_calibration(calib, seed, WindowStatistic::Kl)?;
            let target = match (side, region) {
                (Some(s), None) => AlignTarget::Side((*s).into()),
                (None, Some(r)) => AlignTarget::Region(*r),
                _ => bail!("pass exactly one of --side or --region"),
            };
            let params = AlignParams {
                min_confidence: *min_conf,
                max_attempts: *max_attempts,
                shape: calib.shape,
            };
            let r = sampling::align(target, &calib, &params, seed)?;
            npy::write_tensor(out, &r.noise)?;
            if let Some(path) = report {
                #[derive(Serialize)]
                struct AlignReport<'a> {
                    success: bool,
                    attempts: usize,
                    noise_seed: u64,
                    target: AlignTarget,
                    detection: &'a Option<triggerlab::Detection>,
                }
                write_json(
                    path,
                    &AlignReport {
                        success: r.success,
                        attempts: r.attempts,
                        noise_seed: r.noise_seed,
                        target: r.target,
                        detection: &r.detection,
                    },
                )?;
            }
            if !r.success {
                eprintln!("warning: no accepted noise in {} attempts", r.attempts);
            }
        }
        Command::Simulate {
            seeds,
            inject_std,
            inject_mean,
            sine_theta,
            baseline,
            patch_size,
            calib,
            adapter,
            variance_statistic,
            report,
        } => {
            let statistic = if *variance_statistic {
                WindowStatistic::Variance
            } else {
                WindowStatistic::Kl
            };
            let (backend, shape) = generation_backend(adapter, calib, seed, statistic)?;
            let source = match (baseline, sine_theta) {
                (Some(BaselineArg::Resampling), _) => InjectionSource::Resampling,
                (Some(BaselineArg::Random), _) => InjectionSource::Random,
                (None, Some(theta)) => InjectionSource::Sine { theta: *theta },
                (None, None) => InjectionSource::ShiftedGaussian {
                    std: *inject_std,
                    mean: *inject_mean,
                },
            };
            let r = experiments::simulate_isr(
                backend.as_ref(),
                &IsrParams {
                    trials: *seeds,
                    patch_size: *patch_size,
                    seed,
                    source,
                    shape,
                },
            )?;
            write_json(report, &r)?;
            eprintln!("isr {:.4} ({}/{})", r.isr, r.successes, r.trials);
        }
        Command::Evaluate(e) => evaluate(e, seed)?,
        Command::Dataset(d) => dataset(d, seed)?,
    }
    Ok(())
}

fn statistic_of(s: StatisticArg) -> WindowStatistic {
    match s {
        StatisticArg::Kl => WindowStatistic::Kl,
        StatisticArg::Variance => WindowStatistic::Variance,
    }
}

fn load_calibration(
    args: &CalibArgs,
    seed: u64,
    statistic: WindowStatistic,
) -> Result<NullCalibration> {
    let calib = match &args.calib {
        Some(path) => NullCalibration::load(path)?,
        None => calibrate(&CalibrationConfig {
            n_noises: args.calib_noises,
            seed: stream(seed, "calibration"),
            statistic,
            ..Default::default()
        })?,
    };
    if calib.statistic != statistic {
        bail!(
            "calibration uses the {:?} statistic, this run needs {:?}",
            calib.statistic,
            statistic
        );
    }
    Ok(calib)
}

fn synthetic_backend(
    args: &CalibArgs,
    seed: u64,
    statistic: WindowStatistic,
) -> Result<SyntheticBackend> {
    let calib = load_calibration(args, seed, statistic)?;
    Ok(SyntheticBackend::new(
        calib,
        SyntheticParams {
            seed: stream(seed, "backend"),
            ..Default::default()
        },
    )?)
}

fn npy_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "npy"));
    files.sort();
    Ok(files)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn entropy(manifest: &Path, out: &Path) -> Result<()> {
    let m = DatasetManifest::load(manifest)?;
    #[derive(Serialize)]
    struct Row<'a> {
        noise_id: &'a str,
        n: usize,
        #[serde(rename = "H")]
        h: f64,
        mean_xc: f64,
        mean_yc: f64,
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in &m.records {
        let boxes = m.latent_boxes(r)?;
        if boxes.is_empty() {
            skipped += 1;
            continue;
        }
        let e = trigger_entropy(&r.noise_id, &boxes)?;
        rows.push(Row {
            noise_id: &r.noise_id,
            n: e.n,
            h: e.entropy,
            mean_xc: e.mean_center.0,
            mean_yc: e.mean_center.1,
        });
    }
    write_csv(out, rows)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} records without boxes");
    }
    Ok(())
}

#[derive(Deserialize)]
struct IsrCaseInput {
    trigger: Region,
    detected: Option<BBoxAnnotation>,
}

/// The external adapter when one is configured, the synthetic backend otherwise.
fn generation_backend(
    adapter: &AdapterArgs,
    calib: &CalibArgs,
    seed: u64,
    statistic: WindowStatistic,
) -> Result<(Box<dyn Backend>, Shape)> {
    match &adapter.adapter {
        Some(command) => {
            let b = ExternalBackend::new(
                command.split_whitespace().map(str::to_owned).collect(),
                &adapter.adapter_dir,
                std::time::Duration::from_secs(adapter.adapter_timeout_secs),
            )?;
            Ok((Box::new(b), Shape::default()))
        }
        None => {
            let b = synthetic_backend(calib, seed, statistic)?;
            let shape = b.calibration().shape;
            Ok((Box::new(b), shape))
        }
    }
}

fn evaluate(cmd: &EvaluateCommand, seed: u64) -> Result<()> {
    match cmd {
        EvaluateCommand::Isr { cases, out } => {
            let text = fs::read_to_string(cases)
                .with_context(|| format!("reading {}", cases.display()))?;
            let input: Vec<IsrCaseInput> = serde_json::from_str(&text)?;
            let cases: Vec<InjectionCase> = input
                .into_iter()
                .map(|c| InjectionCase {
                    trigger: c.trigger,
                    detected: c.detected,
                })
                .collect();
            let rate = isr(&cases)?;
            write_json(
                out,
                &serde_json::json!({ "isr": rate, "cases": cases.len(), "successes": (rate * cases.len() as f64).round() as usize }),
            )?;
        }
        EvaluateCommand::Gsr {
            side,
            trials,
            align,
            min_conf,
            max_attempts,
            calib,
            report,
        } => {
            let backend = synthetic_backend(calib, seed, WindowStatistic::Kl)?;
            let shape = backend.calibration().shape;
            let params = GsrParams {
                trials: *trials,
                seed,
                align: align.then_some(AlignParams {
                    min_confidence: *min_conf,
                    max_attempts: *max_attempts,
                    shape,
                }),
                shape,
            };
            let r = experiments::simulate_gsr(
                &backend,
                backend.calibration(),
                (*side).into(),
                &params,
            )?;
            write_json(report, &r)?;
            eprintln!("gsr {:.4}", r.gsr);
        }
        EvaluateCommand::Map50 {
            manifest,
            detections,
            out,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let dets: BTreeMap<String, Vec<ScoredBox>> = load_detections(detections)?
                .into_iter()
                .map(|d| (d.noise_id, d.boxes))
                .collect();
            let score = experiments::map50_against(&m, &dets)?;
            write_json(
                out,
                &serde_json::json!({ "map50": score, "records": m.records.len() }),
            )?;
            eprintln!("mAP50 {score:.4}");
        }
        EvaluateCommand::Diversity {
            seeds,
            purified,
            min_conf,
            max_iters,
            calib,
            report,
        } => {
            let backend = synthetic_backend(calib, seed, WindowStatistic::Kl)?;
            let params = DiversityParams {
                n_seeds: *seeds,
                purified: *purified,
                min_confidence: *min_conf,
                max_iters: *max_iters,
                seed,
                shape: backend.calibration().shape,
            };
            let r = sampling::diversity_eval(&backend, backend.calibration(), &params)?;
            let reference = metrics::random_center_baseline(
                10,
                512,
                8.0,
                1000,
                stream(seed, "random-reference"),
            )?;
            let random_mean =
                reference.iter().map(|e| e.entropy).sum::<f64>() / reference.len() as f64;
            #[derive(Serialize)]
            struct DiversityOut<'a> {
                #[serde(flatten)]
                report: &'a sampling::DiversityReport,
                random_reference: f64,
            }
            write_json(
                report,
                &DiversityOut {
                    report: &r,
                    random_reference: random_mean,
                },
            )?;
            eprintln!(
                "mean entropy {:.2} (random {:.2})",
                r.mean_entropy, random_mean
            );
        }
    }
    Ok(())
}

fn dataset(cmd: &DatasetCommand, seed: u64) -> Result<()> {
    match cmd {
        DatasetCommand::Rescale { manifest, out } => {
            let mut m = DatasetManifest::load(manifest)?;
            for r in &mut m.records {
                for a in &mut r.annotations {
                    if a.space == Space::Image {
                        *a = rescale_to_latent(a, m.image_size, m.latent_size)?;
                    }
                }
            }
            ensure_parent(out)?;
            m.save(out)?;
        }
        DatasetCommand::Filter {
            manifest,
            min_score,
            class,
            out,
        } => {
            let mut m = DatasetManifest::load(manifest)?;
            if let Some(c) = class {
                m = restrict_to_class(&m, c)?;
            }
            for r in &mut m.records {
                let kept: Vec<BBoxAnnotation> = m
                    .prompts
                    .iter()
                    .filter_map(|(id, info)| {
                        filter_best(
                            r.annotations.iter().filter(|a| &a.prompt_id == id),
                            &info.class_name,
                            *min_score,
                        )
                    })
                    .cloned()
                    .collect();
                r.annotations = kept;
            }
            ensure_parent(out)?;
            m.save(out)?;
        }
        DatasetCommand::Permute { manifest, out } => {
            let m = DatasetManifest::load(manifest)?;
            ensure_parent(out)?;
            permute_annotations(&m, seed)?.save(out)?;
        }
        DatasetCommand::Synth {
            noises,
            inject_every,
            inject_std,
            calib,
            adapter,
            out_dir,
        } => {
            let (backend, shape) = generation_backend(adapter, calib, seed, WindowStatistic::Kl)?;
            let (m, tensors) = experiments::synthetic_dataset(
                backend.as_ref(),
                &DatasetParams {
                    n_noises: *noises,
                    inject_every: *inject_every,
                    inject_std: *inject_std,
                    seed,
                    shape,
                },
            )?;
            let dir = out_dir.join("noises");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (id, t) in &tensors {
                npy::write_tensor(dir.join(format!("{id}.npy")), t)?;
            }
            m.save(out_dir.join("manifest.json"))?;
        }
    }
    Ok(())
}
