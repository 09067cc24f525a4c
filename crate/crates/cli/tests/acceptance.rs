//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed here.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use triggerlab::annotations::{permute_annotations, restrict_to_class};
use triggerlab::backend::{SyntheticBackend, SyntheticParams};
use triggerlab::detector::{
    calibrate_null, detect, map50, BoxF, EvalImage, ScoredBox, DEFAULT_MIN_CONFIDENCE,
    DEFAULT_NMS_IOU,
};
use triggerlab::experiments::{
    decile_fixture, map50_against, simulate_gsr, simulate_isr, synthetic_dataset, DatasetParams,
    GsrParams, InjectionSource, IsrParams,
};
use triggerlab::metrics::{random_center_baseline, trigger_entropy};
use triggerlab::sampling::{diversity_eval, AlignParams, DiversityParams};
use triggerlab::stats::{decile_analysis, energy_distance, permutation_test, DecileParams};
use triggerlab::synth::{
    synth_shifted_gaussian, synth_sine_patch, ShiftedGaussianSpec, SinePatchSpec,
};
use triggerlab::tensor::{inject_patch, sample_noise};
use triggerlab::{rng, BBoxAnnotation, NullCalibration, Patch, Region, Shape, Side, Space};

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn latent_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BBoxAnnotation {
    BBoxAnnotation {
        x1,
        y1,
        x2,
        y2,
        class_name: "obj".into(),
        score: 0.9,
        prompt_id: "p".into(),
        space: Space::Latent,
    }
}

fn calibration() -> NullCalibration {
    calibrate_null(24, 4, 200, 2024).expect("calibration")
}

fn backend(calib: &NullCalibration) -> SyntheticBackend {
    SyntheticBackend::new(
        calib.clone(),
        SyntheticParams {
            seed: 7,
            ..Default::default()
        },
    )
    .expect("backend")
}

/// Pairwise form of the population variance: `1/(2n²) ΣΣ (a_i - a_j)²`.
fn pairwise_popvar(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mut s = 0.0;
    for a in v {
        for b in v {
            s += (a - b) * (a - b);
        }
    }
    s / (2.0 * n * n)
}

fn entropy_oracle() -> Check {
    let started = Instant::now();
    let mut rng = rng::chacha(11);
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=40);
        let boxes: Vec<BBoxAnnotation> = (0..n)
            .map(|_| {
                let (x1, y1) = (
                    rng.random_range(0..63) as f64,
                    rng.random_range(0..63) as f64,
                );
                let (w, h) = (
                    rng.random_range(1..=24) as f64,
                    rng.random_range(1..=24) as f64,
                );
                latent_box(x1, y1, x1 + w, y1 + h)
            })
            .collect();
        let h = trigger_entropy("r", &boxes)
            .map_err(|e| e.to_string())?
            .entropy;
        let xs: Vec<f64> = boxes.iter().map(|b| b.center().0).collect();
        let ys: Vec<f64> = boxes.iter().map(|b| b.center().1).collect();
        let oracle = 0.5 * (pairwise_popvar(&xs) + pairwise_popvar(&ys));
        max_err = max_err.max((h - oracle).abs());
        let identical = boxes.iter().all(|b| b.center() == boxes[0].center());
        ensure(
            (h == 0.0) == identical,
            "H = 0 must hold exactly when all centers coincide",
        )?;

        let (dx, dy) = (
            rng.random_range(-20..=20) as f64,
            rng.random_range(-20..=20) as f64,
        );
        let moved: Vec<BBoxAnnotation> = boxes
            .iter()
            .map(|b| latent_box(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy))
            .collect();
        let h2 = trigger_entropy("r", &moved)
            .map_err(|e| e.to_string())?
            .entropy;
        ensure(h2 == h, format!("translation changed H: {h} vs {h2}"))?;

        // Same centers, different sizes.
        let same: Vec<BBoxAnnotation> = (0..n)
            .map(|k| {
                latent_box(
                    30.0 - k as f64,
                    10.0 - k as f64,
                    34.0 + k as f64,
                    14.0 + k as f64,
                )
            })
            .collect();
        ensure(
            trigger_entropy("s", &same)
                .map_err(|e| e.to_string())?
                .entropy
                == 0.0,
            "identical centers",
        )?;
    }
    ensure(max_err <= 1e-9, format!("max |H - oracle| = {max_err:e}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("took {secs:.2}s"))?;
    Ok(format!("1000 lists, max err {max_err:.1e}, {secs:.2}s"))
}

fn naive_energy(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += d(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    2.0 * mean(x, y) - mean(x, x) - mean(y, y)
}

fn gaussian_rows(seed: u64, rows: usize, dim: usize, std: f64) -> Vec<Vec<f64>> {
    let mut buf = vec![0f32; rows * dim];
    rng::fill_standard_normal(seed, &mut buf);
    buf.chunks(dim)
        .map(|c| c.iter().map(|&v| std * f64::from(v)).collect())
        .collect()
}

fn energy_oracle() -> Check {
    let pts = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let e = |x: &[Vec<f64>], y: &[Vec<f64>]| energy_distance(x, y).map_err(|e| e.to_string());
    ensure(
        e(&pts(&[0.0, 2.0]), &pts(&[1.0, 3.0]))? == 1.0,
        "E({0,2},{1,3}) != 1",
    )?;
    ensure(e(&pts(&[0.0]), &pts(&[1.0]))? == 2.0, "E({0},{1}) != 2")?;
    let mut max_rel = 0.0f64;
    let mut cases = 0;
    for dim in [1usize, 4, 2304] {
        for (k, &(m, n)) in [(1, 1), (2, 3), (7, 5), (40, 60), (200, 200), (150, 17)]
            .iter()
            .enumerate()
        {
            let seed = (dim * 100 + k) as u64;
            let x = gaussian_rows(seed, m, dim, 1.0);
            let y = gaussian_rows(seed + 1, n, dim, 1.3);
            let fast = e(&x, &y)?;
            let slow = naive_energy(&x, &y);
            max_rel = max_rel.max((fast - slow).abs() / slow.abs().max(1.0));
            ensure(e(&x, &x)? == 0.0, format!("E(X,X) != 0 at dim {dim}"))?;
            cases += 1;
        }
    }
    ensure(max_rel <= 1e-9, format!("max deviation {max_rel:e}"))?;
    Ok(format!(
        "{cases} cases over dims 1/4/2304, max deviation {max_rel:.1e}"
    ))
}

fn permutation_calibration() -> Check {
    let (mut null_ok, mut power_ok) = (0, 0);
    for t in 0..100u64 {
        let x = gaussian_rows(rng::derive_seed(1, t), 50, 2304, 1.0);
        let y = gaussian_rows(rng::derive_seed(2, t), 50, 2304, 1.0);
        let y_wide = gaussian_rows(rng::derive_seed(3, t), 50, 2304, 1.5);
        if permutation_test(&x, &y, 999, t)
            .map_err(|e| e.to_string())?
            .p_value
            > 0.05
        {
            null_ok += 1;
        }
        if permutation_test(&x, &y_wide, 999, t)
            .map_err(|e| e.to_string())?
            .p_value
            <= 0.05
        {
            power_ok += 1;
        }
    }
    ensure(null_ok >= 90, format!("null: p > 0.05 in {null_ok}/100"))?;
    ensure(
        power_ok >= 95,
        format!("power: p <= 0.05 in {power_ok}/100"),
    )?;
    Ok(format!(
        "null {null_ok}/100 with p > 0.05, power {power_ok}/100 with p <= 0.05"
    ))
}

fn sine_patch() -> Check {
    let mut rng = rng::chacha(5);
    let region = Region::new(0, 0, 24, 24).map_err(|e| e.to_string())?;
    let base_of = |seed: u64| {
        synth_shifted_gaussian(
            &ShiftedGaussianSpec::new(1.0, 0.0).unwrap(),
            region,
            4,
            seed,
        )
        .unwrap()
    };
    for s in 0..20 {
        let b = base_of(s);
        ensure(
            synth_sine_patch(&b, &SinePatchSpec::with_theta(0.0).unwrap()).unwrap() == b,
            "θ=0 must be the identity",
        )?;
    }
    let mut spot_err = 0.0f64;
    for k in 0..=10 {
        let theta = k as f64 / 10.0 * FRAC_PI_2;
        let b = base_of(100 + k);
        let out = synth_sine_patch(&b, &SinePatchSpec::with_theta(theta).unwrap()).unwrap();
        let (s, c) = theta.sin_cos();
        let at6 = s * ((TAU * 6.0 / 24.0).sin()) + c * f64::from(b.get(0, 0, 6));
        let at0 = c * f64::from(b.get(0, 0, 0));
        spot_err = spot_err
            .max((f64::from(out.get(0, 0, 6)) - at6).abs())
            .max((f64::from(out.get(0, 0, 0)) - at0).abs());
    }
    ensure(spot_err <= 1e-4, format!("spot values off by {spot_err:e}"))?;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..10_000u64 {
        let theta = rng.random_range(0.0..=FRAC_PI_2);
        let side = rng.random_range(1..=24usize);
        let r = Region::new(0, 0, side, side).unwrap();
        let spread = rng.random_range(0.1..5.0);
        let b = synth_shifted_gaussian(&ShiftedGaussianSpec::new(spread, 0.0).unwrap(), r, 4, i)
            .unwrap();
        let out = synth_sine_patch(&b, &SinePatchSpec::with_theta(theta).unwrap()).unwrap();
        let max_base = b
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
        let bound = 3.0 * theta.sin().abs() + theta.cos().abs() * max_base;
        let peak = out
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
        // f32 storage rounds the output by at most a few ulps.
        worst = worst.max(peak - bound - 1e-5 * bound.max(1.0));
    }
    ensure(worst <= 0.0, format!("bound exceeded by {worst:e}"))?;
    Ok(format!(
        "identity exact, spot err {spot_err:.1e}, 10k patches within bound"
    ))
}

fn injected(seed: u64, std: f64) -> (triggerlab::LatentTensor, Region) {
    let mut pick = rng::chacha(rng::derive_seed(seed, 99));
    let (x, y) = (
        pick.random_range(0..=40usize),
        pick.random_range(0..=40usize),
    );
    let region = Region::new(x, y, x + 24, y + 24).unwrap();
    let patch: Patch = synth_shifted_gaussian(
        &ShiftedGaussianSpec::new(std, 0.0).unwrap(),
        region,
        4,
        seed ^ 0xABCD,
    )
    .unwrap();
    let noise = sample_noise(seed, Shape::default()).unwrap();
    (inject_patch(&noise, &patch, &region).unwrap(), region)
}

fn detector_monotonicity(calib: &NullCalibration) -> Check {
    let mut means = Vec::new();
    let mut localized = 0;
    for std in [1.0, 1.2, 1.5] {
        let mut total = 0.0;
        for s in 0..100u64 {
            let (noise, region) = injected(1000 + s, std);
            let top = detect(&noise, calib, 0.0, 0.5)
                .into_iter()
                .next()
                .ok_or("no window scored")?;
            total += top.score;
            if std == 1.5 {
                let (cx, cy) = top.center();
                let (tx, ty) = region.center();
                if ((cx - tx).powi(2) + (cy - ty).powi(2)).sqrt() <= 4.0 {
                    localized += 1;
                }
            }
        }
        means.push(total / 100.0);
    }
    ensure(
        means[0] < means[1] && means[1] < means[2],
        format!("mean top scores {means:?}"),
    )?;
    ensure(localized >= 95, format!("localized {localized}/100"))?;
    Ok(format!(
        "mean top score {:.1} < {:.1} < {:.1}; localized {localized}/100",
        means[0], means[1], means[2]
    ))
}

fn end_to_end_isr(calib: &NullCalibration) -> Check {
    let started = Instant::now();
    let b = backend(calib);
    let run = |source| {
        simulate_isr(
            &b,
            &IsrParams {
                trials: 200,
                seed: 31,
                source,
                ..Default::default()
            },
        )
        .map(|r| r.isr)
        .map_err(|e| e.to_string())
    };
    let injected = run(InjectionSource::ShiftedGaussian {
        std: 1.5,
        mean: 0.0,
    })?;
    let resampling = run(InjectionSource::Resampling)?;
    let random = run(InjectionSource::Random)?;
    ensure(injected >= 0.90, format!("std-1.5 ISR {injected}"))?;
    ensure(resampling <= 0.15, format!("resampling ISR {resampling}"))?;
    ensure(random <= 0.05, format!("random ISR {random}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "std-1.5 {injected:.3}, resampling {resampling:.3}, random {random:.3}, {secs:.1}s"
    ))
}

fn purify_diversity(calib: &NullCalibration) -> Check {
    let b = backend(calib);
    let params = DiversityParams {
        n_seeds: 200,
        seed: 17,
        ..Default::default()
    };
    let raw = diversity_eval(&b, calib, &params)
        .map_err(|e| e.to_string())?
        .mean_entropy;
    let purified = diversity_eval(
        &b,
        calib,
        &DiversityParams {
            purified: true,
            ..params
        },
    )
    .map_err(|e| e.to_string())?
    .mean_entropy;
    let reference = random_center_baseline(10, 512, 8.0, 2000, 23).map_err(|e| e.to_string())?;
    let random = reference.iter().map(|r| r.entropy).sum::<f64>() / reference.len() as f64;
    ensure(
        purified >= 1.10 * raw,
        format!("purified {purified:.2} vs raw {raw:.2}"),
    )?;
    ensure(
        (purified / random - 1.0).abs() <= 0.10,
        format!("purified {purified:.2} vs random {random:.2}"),
    )?;
    Ok(format!(
        "raw {raw:.2}, purified {purified:.2} (+{:.0}%), random {random:.2}",
        100.0 * (purified / raw - 1.0)
    ))
}

fn align_gsr(calib: &NullCalibration) -> Check {
    let b = backend(calib);
    let mut parts = Vec::new();
    for (k, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        let base = GsrParams {
            trials: 500,
            seed: 40 + k as u64,
            ..Default::default()
        };
        let plain = simulate_gsr(&b, calib, side, &base)
            .map_err(|e| e.to_string())?
            .gsr;
        let aligned = simulate_gsr(
            &b,
            calib,
            side,
            &GsrParams {
                align: Some(AlignParams::default()),
                ..base
            },
        )
        .map_err(|e| e.to_string())?
        .gsr;
        ensure(
            aligned - plain >= 0.20,
            format!("{}: {plain:.3} -> {aligned:.3}", side.name()),
        )?;
        parts.push(format!(
            "{} {:.1}% -> {:.1}%",
            side.name(),
            100.0 * plain,
            100.0 * aligned
        ));
    }
    Ok(parts.join(", "))
}

fn decile_fixture_check() -> Check {
    let (manifest, noises) = decile_fixture(40, 10, 8).map_err(|e| e.to_string())?;
    let a = decile_analysis(
        &manifest,
        &noises,
        &DecileParams {
            seed: 3,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(
        a.spearman_rho < 0.0 && a.spearman_p < 0.05,
        format!("rho {} p {}", a.spearman_rho, a.spearman_p),
    )?;
    Ok(format!("rho {:.3}, p {:.2e}", a.spearman_rho, a.spearman_p))
}

fn map_checks(calib: &NullCalibration) -> Check {
    let sb = |x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64| ScoredBox {
        x1,
        y1,
        x2,
        y2,
        confidence,
        score: None,
    };
    let bf = |x1: f64, y1: f64, x2: f64, y2: f64| BoxF { x1, y1, x2, y2 };
    let gt = vec![bf(0.0, 0.0, 10.0, 10.0), bf(20.0, 20.0, 30.0, 30.0)];
    let perfect = EvalImage {
        detections: gt.iter().map(|b| sb(b.x1, b.y1, b.x2, b.y2, 0.9)).collect(),
        ground_truth: gt.clone(),
    };
    ensure(map50(&[perfect]) == 1.0, "perfect detections")?;
    ensure(
        map50(&[EvalImage {
            detections: vec![],
            ground_truth: gt.clone(),
        }]) == 0.0,
        "empty detections",
    )?;
    // TP, FP, TP, TP over three ground-truth boxes: AP = 1/3 + 1/4 + 1/4.
    let a = EvalImage {
        detections: vec![
            sb(0.0, 0.0, 10.0, 10.0, 0.9),
            sb(20.0, 20.0, 30.0, 31.0, 0.7),
        ],
        ground_truth: gt,
    };
    let b = EvalImage {
        detections: vec![
            sb(50.0, 50.0, 60.0, 60.0, 0.8),
            sb(1.0, 1.0, 11.0, 11.0, 0.6),
        ],
        ground_truth: vec![bf(0.0, 0.0, 10.0, 10.0)],
    };
    let hand = map50(&[a, b]);
    ensure(
        (hand - 5.0 / 6.0).abs() <= 1e-6,
        format!("hand fixture {hand}"),
    )?;

    let backend = backend(calib);
    let (manifest, noises) = synthetic_dataset(
        &backend,
        &DatasetParams {
            n_noises: 200,
            seed: 9,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let dets: BTreeMap<String, Vec<ScoredBox>> = noises
        .iter()
        .map(|(id, n)| {
            let found = detect(n, calib, DEFAULT_MIN_CONFIDENCE, DEFAULT_NMS_IOU);
            (id.clone(), found.iter().map(ScoredBox::from).collect())
        })
        .collect();
    // Single-class ground truth, as a detector would be trained on.
    let manifest = restrict_to_class(&manifest, "sports ball").map_err(|e| e.to_string())?;
    let truth = map50_against(&manifest, &dets).map_err(|e| e.to_string())?;
    let permuted = permute_annotations(&manifest, 10).map_err(|e| e.to_string())?;
    let shuffled = map50_against(&permuted, &dets).map_err(|e| e.to_string())?;
    ensure(
        truth > shuffled,
        format!("true {truth:.3} vs permuted {shuffled:.3}"),
    )?;
    Ok(format!(
        "fixtures exact; synthetic single-class mAP50 {truth:.3} vs permuted {shuffled:.3}"
    ))
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_triggerlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("TRIGGERLAB_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Check {
    let script: Vec<Vec<&str>> = vec![
        vec!["sample", "--seed", "7", "--out", "sample/n.npy"],
        vec![
            "calibrate",
            "--noises",
            "100",
            "--seed",
            "1",
            "--out",
            "calib/calib.json",
        ],
        vec![
            "synth-patch",
            "--kind",
            "sine",
            "--theta",
            "0.7",
            "--seed",
            "2",
            "--out",
            "patch/p.npy",
        ],
        vec![
            "inject",
            "--noise",
            "sample/n.npy",
            "--patch",
            "patch/p.npy",
            "--x",
            "10",
            "--y",
            "12",
            "--out",
            "inj/n.npy",
        ],
        vec![
            "resample",
            "--noise",
            "inj/n.npy",
            "--region",
            "10,12,34,36",
            "--match-moments",
            "--out",
            "res/n.npy",
        ],
        vec![
            "dataset",
            "synth",
            "--noises",
            "30",
            "--calib",
            "calib/calib.json",
            "--seed",
            "3",
            "--out-dir",
            "ds",
        ],
        vec![
            "detect",
            "--noise-dir",
            "ds/noises",
            "--calib",
            "calib/calib.json",
            "--min-conf",
            "0.9",
            "--out",
            "det/detections.json",
        ],
        vec![
            "evaluate",
            "map50",
            "--manifest",
            "ds/manifest.json",
            "--detections",
            "det/detections.json",
            "--out",
            "map/map.json",
        ],
        vec![
            "dataset",
            "permute",
            "--manifest",
            "ds/manifest.json",
            "--seed",
            "4",
            "--out",
            "perm/manifest.json",
        ],
        vec![
            "entropy",
            "--manifest",
            "ds/manifest.json",
            "--out",
            "ent/entropy.csv",
        ],
        vec![
            "heatmap",
            "--manifest",
            "ds/manifest.json",
            "--noise-id",
            "noise-00000",
            "--out",
            "heat/heatmap.csv",
        ],
        vec![
            "energy-test",
            "--a",
            "sample/n.npy",
            "--b",
            "inj/n.npy",
            "--perms",
            "199",
            "--seed",
            "5",
            "--out",
            "energy/result.json",
        ],
        vec![
            "purify",
            "--noise",
            "inj/n.npy",
            "--calib",
            "calib/calib.json",
            "--seed",
            "6",
            "--out",
            "pur/n.npy",
            "--report",
            "pur/report.json",
        ],
        vec![
            "align",
            "--side",
            "left",
            "--calib",
            "calib/calib.json",
            "--max-attempts",
            "60",
            "--seed",
            "8",
            "--out",
            "align/n.npy",
            "--report",
            "align/align.json",
        ],
        vec![
            "simulate",
            "--seeds",
            "20",
            "--calib",
            "calib/calib.json",
            "--seed",
            "9",
            "--report",
            "sim/isr.json",
        ],
        vec![
            "evaluate",
            "diversity",
            "--seeds",
            "10",
            "--purified",
            "--calib",
            "calib/calib.json",
            "--report",
            "div/diversity.json",
        ],
        vec![
            "evaluate",
            "gsr",
            "--side",
            "right",
            "--trials",
            "10",
            "--calib",
            "calib/calib.json",
            "--report",
            "gsr/gsr.json",
        ],
    ];
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for args in &script {
        cli(a.path(), args)?;
        cli(b.path(), args)?;
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    ensure(sa.keys().eq(sb.keys()), "different file sets")?;
    let runs = sa.keys().filter(|k| k.ends_with("run.json")).count();
    ensure(
        runs == script.len(),
        format!("{runs} run.json files for {} runs", script.len()),
    )?;
    for (k, v) in &sa {
        ensure(sb[k] == *v, format!("{k} differs between identical runs"))?;
    }
    Ok(format!(
        "{} commands, {} files byte-identical",
        script.len(),
        sa.len()
    ))
}

fn main() {
    let calib = calibration();
    let criteria: Vec<Criterion> = vec![
        ("entropy oracle", Box::new(entropy_oracle)),
        ("energy statistic oracle", Box::new(energy_oracle)),
        (
            "permutation test null and power",
            Box::new(permutation_calibration),
        ),
        ("sine patch", Box::new(sine_patch)),
        (
            "detector monotonicity and localization",
            Box::new(|| detector_monotonicity(&calib)),
        ),
        (
            "synthetic end-to-end ISR",
            Box::new(|| end_to_end_isr(&calib)),
        ),
        ("purify diversity", Box::new(|| purify_diversity(&calib))),
        ("align GSR", Box::new(|| align_gsr(&calib))),
        ("decile analysis fixture", Box::new(decile_fixture_check)),
        ("mAP50", Box::new(|| map_checks(&calib))),
        ("CLI determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  A{:02} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  A{:02} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
