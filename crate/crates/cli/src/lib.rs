//! Subcommands of the `stdr` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stdr_core::cloud::MaskDistribution;
use stdr_core::scenes::{generate_scene, load_dataset, save_dataset, Motion, MotionKind, SceneSpec};
use stdr_core::trainer::{
    self, evaluate_frames, load_checkpoint, load_for_dataset, mean_metrics, render_view, Config, RunOptions,
    TrainState, CHECKPOINT_FILE, METRICS_FILE,
};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "stdr", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")"))]
#[command(about = "Dynamic Gaussian splatting with spatio-temporal masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dynamic scene with a ghosted initialization.
    Generate(GenerateArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Render one view from a checkpoint to PNG.
    Render(RenderArgs),
    /// PSNR/SSIM of a checkpoint on dataset frames.
    Eval(EvalArgs),
    /// Dump the per-Gaussian mask distribution and its entropy as CSV.
    InspectMasks(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MotionArg {
    Linear,
    Circular,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of timestamps K.
    #[arg(long, default_value_t = 8)]
    pub timestamps: usize,
    #[arg(long, default_value_t = 200)]
    pub n_static: usize,
    #[arg(long, default_value_t = 50)]
    pub n_dynamic: usize,
    #[arg(long, value_enum, default_value = "linear")]
    pub motion: MotionArg,
    /// Motion amplitude in scene units.
    #[arg(long, default_value_t = 2.0)]
    pub amplitude: f64,
    /// Radius of the dynamic blob.
    #[arg(long, default_value_t = 0.12)]
    pub blob_radius: f64,
    /// Ring cameras, including held-out ones.
    #[arg(long, default_value_t = 13)]
    pub cameras: usize,
    #[arg(long, default_value_t = 1)]
    pub held_out: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, metrics and the effective config.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", conflicts_with = "resume")]
    pub overrides: Vec<String>,
    /// Total iterations (overrides train.iterations).
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Baseline: no masks, no regularizers, position-only deformation input.
    #[arg(long, conflicts_with = "resume")]
    pub no_stdr: bool,
    /// Continue from this checkpoint with its stored config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Progress line every this many iterations (0 = quiet).
    #[arg(long, default_value_t = 1000)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory providing the cameras.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub camera: usize,
    /// Timestamp index in [0, K).
    #[arg(long)]
    pub timestamp: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Heldout,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    pub split: Split,
    /// Also write the table to this CSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Map an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<stdr_core::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_VALIDATION
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::InspectMasks(a) => inspect_masks(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SceneSpec {
        timestamps: a.timestamps,
        n_static: a.n_static,
        n_dynamic: a.n_dynamic,
        motion: Motion {
            kind: match a.motion {
                MotionArg::Linear => MotionKind::Linear,
                MotionArg::Circular => MotionKind::Circular,
            },
            amplitude: a.amplitude,
        },
        cameras: a.cameras,
        held_out: a.held_out,
        width: a.size,
        height: a.size,
        blob_radius: a.blob_radius,
        seed: a.seed,
        ..SceneSpec::default()
    };
    let data = generate_scene(&spec)?;
    save_dataset(&data, &a.out)?;
    println!(
        "generated {}: {} init points, K = {}, {} frames ({} held out)",
        a.out.display(),
        data.manifest.init_points.len(),
        spec.timestamps,
        data.manifest.frames.len(),
        data.eval_frames().len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let (mut state, append) = match &a.resume {
        Some(path) => {
            let mut s = load_for_dataset(path, &data)?;
            if let Some(n) = a.iterations {
                s.config.train.iterations = n;
            }
            (s, true)
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            for o in &a.overrides {
                cfg.apply_override(o)?;
            }
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if a.no_stdr {
                cfg.train.stdr = false;
            }
            cfg.validate()?;
            let state = TrainState::new(cfg, &data.init_positions(), &data.init_colors(), data.timestamps())?;
            (state, false)
        }
    };
    let until = state.config.train.iterations;
    if state.iteration > until {
        bail!(stdr_core::Error::Validation(format!(
            "checkpoint is at iteration {} beyond the requested {until}",
            state.iteration
        )));
    }
    // Train in chunks so progress can be reported.
    let chunk = if a.log_every == 0 { u64::MAX } else { a.log_every };
    let mut first = true;
    loop {
        let next = state.iteration.saturating_add(chunk).min(until);
        trainer::train(
            &mut state,
            &data,
            &RunOptions {
                out_dir: a.out.clone(),
                until: next,
                append_metrics: append || !first,
            },
        )?;
        first = false;
        if a.log_every > 0 {
            eprintln!("iteration {}/{until} ({})", state.iteration, state.phase());
        }
        if state.iteration >= until {
            break;
        }
    }
    println!(
        "trained to iteration {}; wrote {} and {}",
        state.iteration,
        a.out.join(CHECKPOINT_FILE).display(),
        a.out.join(METRICS_FILE).display()
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let state = load_for_dataset(&a.checkpoint, &data)?;
    let cams = &data.manifest.cameras;
    if a.camera >= cams.len() {
        bail!(stdr_core::Error::Validation(format!(
            "camera {} out of range (have {})",
            a.camera,
            cams.len()
        )));
    }
    if a.timestamp >= state.k() {
        bail!(stdr_core::Error::Validation(format!(
            "timestamp {} out of range (K = {})",
            a.timestamp,
            state.k()
        )));
    }
    let img = render_view(&state, &cams[a.camera], a.timestamp)?;
    img.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let state = load_for_dataset(&a.checkpoint, &data)?;
    let frames = match a.split {
        Split::Heldout => data.eval_frames(),
        Split::Train => data.train_frames(),
        Split::All => (0..data.manifest.frames.len()).collect(),
    };
    if frames.is_empty() {
        bail!(stdr_core::Error::Validation(format!(
            "the {:?} split has no frames",
            a.split
        )));
    }
    let rows = evaluate_frames(&state, &data, &frames)?;
    let mut text = String::from("frame,camera,timestamp,psnr,ssim\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.frame,
            r.camera,
            r.timestamp,
            fmt_metric(r.psnr),
            fmt_metric(r.ssim)
        ));
    }
    let (p, s) = mean_metrics(&rows);
    text.push_str(&format!("mean,,,{},{}\n", fmt_metric(p), fmt_metric(s)));
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    Ok(())
}

/// CSV of the distribution: `gaussian,t0..t{K-1},entropy`.
pub fn masks_csv(dist: &MaskDistribution) -> String {
    let mut text = String::from("gaussian");
    for t in 0..dist.k {
        text.push_str(&format!(",t{t}"));
    }
    text.push_str(",entropy\n");
    for (i, h) in dist.entropies().iter().enumerate() {
        text.push_str(&i.to_string());
        for p in dist.row(i) {
            text.push_str(&format!(",{p}"));
        }
        text.push_str(&format!(",{h}\n"));
    }
    text
}

fn inspect_masks(a: InspectArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let dist = state.cached.clone().unwrap_or_else(|| state.cloud.mask_distribution());
    let text = masks_csv(&dist);
    match &a.out {
        Some(p) => write_file(p, &text)?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .context("writing to stdout")?,
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| stdr_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}
