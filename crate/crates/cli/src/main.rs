mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Trigger-patch analysis and reject sampling for diffusion initial noise.
#[derive(Debug, Parser, Serialize)]
#[command(name = "triggerlab", version, propagate_version = true)]
pub struct Cli {
    /// Global seed; every random draw of the run derives from it.
    #[arg(long, global = true, env = "TRIGGERLAB_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for record-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Where to write the resolved run configuration
    /// (default: run.json next to the primary output).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub run_json: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Args, Serialize)]
pub struct ShapeArgs {
    /// Latent channels.
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Latent height in cells.
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Latent width in cells.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
}

impl ShapeArgs {
    pub fn shape(&self) -> triggerlab::Shape {
        triggerlab::Shape::new(self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibArgs {
    /// Null calibration JSON; computed from --seed when absent.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Noises used when computing a calibration on the fly.
    #[arg(long, default_value_t = 200)]
    pub calib_noises: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AdapterArgs {
    /// External generator command (whitespace-split), called with each request directory
    /// appended. Omit to use the synthetic backend.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Parent of the per-request directories.
    #[arg(long, default_value = "adapter-runs")]
    pub adapter_dir: PathBuf,
    /// Per-request adapter timeout in seconds.
    #[arg(long, default_value_t = 600)]
    pub adapter_timeout_secs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Shifted,
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StatisticArg {
    Kl,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineArg {
    Resampling,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SideArg {
    Left,
    Right,
}

impl From<SideArg> for triggerlab::Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Left => triggerlab::Side::Left,
            SideArg::Right => triggerlab::Side::Right,
        }
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Draw a standard-Gaussian noise and write it as .npy.
    Sample {
        #[command(flatten)]
        shape: ShapeArgs,
        /// Output .npy.
        #[arg(long)]
        out: PathBuf,
    },
    /// Paste a patch (.npy, shape C x h x w) into a noise with its top-left corner at (x, y).
    Inject {
        /// Input noise (.npy, C x H x W).
        #[arg(long)]
        noise: PathBuf,
        /// Patch to paste (.npy).
        #[arg(long)]
        patch: PathBuf,
        /// Left column of the target, latent cells.
        #[arg(long)]
        x: usize,
        /// Top row of the target, latent cells.
        #[arg(long)]
        y: usize,
        /// Output .npy.
        #[arg(long)]
        out: PathBuf,
    },
    /// Redraw a rectangle of a noise with fresh normals.
    Resample {
        /// Input noise (.npy, C x H x W).
        #[arg(long)]
        noise: PathBuf,
        /// Rectangle as x1,y1,x2,y2 in latent cells.
        #[arg(long, value_parser = parse_region)]
        region: triggerlab::Region,
        /// Keep the rectangle's mean and standard deviation.
        #[arg(long)]
        match_moments: bool,
        /// Output .npy.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a handcrafted trigger patch.
    SynthPatch {
        /// Patch family.
        #[arg(long, value_enum, default_value_t = PatchKind::Shifted)]
        kind: PatchKind,
        /// Standard deviation of the shifted Gaussian.
        #[arg(long, default_value_t = 1.5)]
        std: f64,
        /// Mean of the shifted Gaussian.
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        /// Blend angle in [0, π/2] for the sine patch.
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        /// Patch side length in cells.
        #[arg(long, default_value_t = 24)]
        size: usize,
        /// Latent channels.
        #[arg(long, default_value_t = 4)]
        channels: usize,
        /// Base noise for the sine patch (the slab at --x/--y); fresh normals when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Left column of the target, latent cells.
        #[arg(long, default_value_t = 0)]
        x: usize,
        /// Top row of the target, latent cells.
        #[arg(long, default_value_t = 0)]
        y: usize,
        /// Output .npy.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trigger entropy per record of a dataset manifest (CSV).
    Entropy {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Box-coverage heatmap of one record as a dense CSV grid.
    Heatmap {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Record to render.
        #[arg(long)]
        noise_id: String,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Energy-distance permutation test between two samples (.npy, first axis = samples).
    EnergyTest {
        /// First sample (.npy).
        #[arg(long)]
        a: PathBuf,
        /// Second sample (.npy).
        #[arg(long)]
        b: PathBuf,
        /// Permutations for the p-value.
        #[arg(long, default_value_t = 999)]
        perms: usize,
        /// Output JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Energy distance of trigger patches vs random patches per entropy group (CSV).
    DecileAnalysis {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding <noise_id>.npy files.
        #[arg(long)]
        noise_dir: PathBuf,
        /// Number of entropy groups (deciles by default).
        #[arg(long, default_value_t = 10)]
        groups: usize,
        /// Patch side length in cells.
        #[arg(long, default_value_t = 24)]
        patch_size: usize,
        /// Permutations for the p-value.
        #[arg(long, default_value_t = 999)]
        perms: usize,
        /// Cap on patch pairs per group; 0 keeps all.
        #[arg(long, default_value_t = 200)]
        max_per_group: usize,
        /// Draw negatives only where they do not touch the trigger patch.
        #[arg(long)]
        exclude_overlap: bool,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write the full analysis (with Spearman statistics) as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Estimate the null distribution of window scores on pure noise.
    Calibrate {
        /// Window side length in cells.
        #[arg(long, default_value_t = 24)]
        window: usize,
        /// Window stride in cells.
        #[arg(long, default_value_t = 4)]
        stride: usize,
        /// Number of noises.
        #[arg(long, default_value_t = 200)]
        noises: usize,
        /// Window statistic.
        #[arg(long, value_enum, default_value_t = StatisticArg::Kl)]
        statistic: StatisticArg,
        #[command(flatten)]
        shape: ShapeArgs,
        /// Output calibration JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect trigger patches in every .npy of a directory (or one file).
    Detect {
        /// Directory of <noise_id>.npy files.
        #[arg(long, conflicts_with = "noise")]
        noise_dir: Option<PathBuf>,
        /// Input noise (.npy, C x H x W).
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Null calibration JSON.
        #[arg(long)]
        calib: PathBuf,
        /// Minimum null confidence for a detection.
        #[arg(long, default_value_t = 0.999)]
        min_conf: f64,
        /// IoU above which overlapping detections are suppressed.
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        /// Output detections JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate detected regions until the noise is clean.
    Purify {
        /// Input noise; drawn from --seed when absent.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[command(flatten)]
        calib: CalibArgs,
        /// Minimum null confidence for a detection.
        #[arg(long, default_value_t = 0.999)]
        min_conf: f64,
        /// Maximum detect/regenerate passes.
        #[arg(long, default_value_t = 10)]
        max_iters: usize,
        /// Output .npy.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON report of the passes.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Reject-sample noises until the top detection sits in the target area.
    Align {
        /// Half of the frame the detection must land in.
        #[arg(
            long,
            value_enum,
            required_unless_present = "region",
            conflicts_with = "region"
        )]
        side: Option<SideArg>,
        /// Target rectangle x1,y1,x2,y2 in latent cells.
        #[arg(long, value_parser = parse_region)]
        region: Option<triggerlab::Region>,
        #[command(flatten)]
        calib: CalibArgs,
        /// Minimum null confidence for a detection.
        #[arg(long, default_value_t = 0.999)]
        min_conf: f64,
        /// Noises to try before giving up.
        #[arg(long, default_value_t = 200)]
        max_attempts: usize,
        /// Output .npy (the accepted noise).
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON report of the attempts.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Injection experiment on the synthetic backend.
    Simulate {
        /// Number of trials.
        #[arg(long, default_value_t = 200)]
        seeds: usize,
        /// Std of the injected shifted-Gaussian patch.
        #[arg(long, default_value_t = 1.5, conflicts_with_all = ["baseline", "sine_theta"])]
        inject_std: f64,
        /// Mean of the injected shifted-Gaussian patch.
        #[arg(long, default_value_t = 0.0)]
        inject_mean: f64,
        /// Inject a sine patch with this blend angle instead.
        #[arg(long, conflicts_with = "baseline")]
        sine_theta: Option<f64>,
        /// Run a control instead of injecting a trigger.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Patch side length in cells.
        #[arg(long, default_value_t = 24)]
        patch_size: usize,
        #[command(flatten)]
        calib: CalibArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        /// Drive the backend with plain slab variance instead of the KL score.
        #[arg(long)]
        variance_statistic: bool,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Success rates and dataset-level metrics.
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
    /// Dataset manifest transforms.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "metric")]
pub enum EvaluateCommand {
    /// ISR from a JSON list of {"trigger": region, "detected": latent box or null}.
    Isr {
        /// Case list JSON.
        #[arg(long)]
        cases: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Guidance success rate of positional prompts on the synthetic backend.
    Gsr {
        /// Half of the frame the detection must land in.
        #[arg(long, value_enum)]
        side: SideArg,
        /// Number of trials.
        #[arg(long, default_value_t = 500)]
        trials: usize,
        /// Reject-sample each noise toward the prompted side first.
        #[arg(long)]
        align: bool,
        /// Minimum null confidence for a detection.
        #[arg(long, default_value_t = 0.999)]
        min_conf: f64,
        /// Noises to try before giving up.
        #[arg(long, default_value_t = 200)]
        max_attempts: usize,
        #[command(flatten)]
        calib: CalibArgs,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Class-agnostic mAP at IoU 0.5 of a detections file against a manifest.
    Map50 {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Detections JSON ([{noise_id, boxes}]).
        #[arg(long)]
        detections: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean trigger entropy of the scene prompts on the synthetic backend.
    Diversity {
        /// Number of trials.
        #[arg(long, default_value_t = 200)]
        seeds: usize,
        /// Purify each noise before generation.
        #[arg(long)]
        purified: bool,
        /// Purify threshold (defaults to the backend spawn level).
        #[arg(long, default_value_t = 0.99)]
        min_conf: f64,
        /// Maximum detect/regenerate passes.
        #[arg(long, default_value_t = 10)]
        max_iters: usize,
        #[command(flatten)]
        calib: CalibArgs,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "transform")]
pub enum DatasetCommand {
    /// Convert every image-space box to latent cells.
    Rescale {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the best box per prompt above a score, of the prompt's class.
    Filter {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Minimum box score.
        #[arg(long, default_value_t = 0.75)]
        min_score: f64,
        /// Keep only prompts of this class.
        #[arg(long)]
        class: Option<String>,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Shuffle annotation lists across records.
    Permute {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate noises and a manifest with the synthetic backend.
    Synth {
        /// Number of noises.
        #[arg(long, default_value_t = 200)]
        noises: usize,
        /// Inject a shifted-Gaussian patch into every n-th noise (0: never).
        #[arg(long, default_value_t = 2)]
        inject_every: usize,
        /// Std of the injected shifted-Gaussian patch.
        #[arg(long, default_value_t = 1.5)]
        inject_std: f64,
        #[command(flatten)]
        calib: CalibArgs,
        #[command(flatten)]
        adapter: AdapterArgs,
        /// Output directory: manifest.json plus noises/<noise_id>.npy.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_region(s: &str) -> Result<triggerlab::Region, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x1, y1, x2, y2] => triggerlab::Region::new(x1, y1, x2, y2).map_err(|e| e.to_string()),
        _ => Err("expected x1,y1,x2,y2".into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
