use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use splatgen_core::assets::{export_ply, export_splat, import_splat, read_manifest, write_manifest, ViewRole};
use splatgen_core::diffusion::{ScheduleKind, DEFAULT_SAMPLE_STEPS};
use splatgen_core::pipeline::{
    self, OracleSpec, ReconstructOptions, SamplerOptions, SynthesizeOptions, DEFAULT_TILE_SIZE,
};
use splatgen_core::synth::{PathKind, DEFAULT_NUM_VIEWS};

mod config;

use config::{pick, FileConfig};

const DEFAULT_RESOLUTION: usize = 512;

#[derive(Debug, Parser)]
#[command(
    name = "splatgen",
    version,
    about = "Synthesize, reconstruct, render and evaluate pixel-aligned Gaussian scenes"
)]
struct Cli {
    /// TOML file with default option values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-trace a procedural scene into images, pointmaps and a manifest.
    Synthesize(SynthesizeArgs),
    /// Build a .splat asset from the manifest's source views.
    Reconstruct(ReconstructArgs),
    /// Render an asset from manifest views or a generated camera path.
    Render(RenderArgs),
    /// Score an asset against ground-truth views; prints JSON lines.
    Eval(EvalArgs),
    /// Run the DDIM sampler with an analytic denoiser.
    SamplerDemo(SamplerArgs),
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resolution: Option<usize>,
    /// Number of source views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    heldout: Option<usize>,
    #[arg(long)]
    complexity: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output .splat path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    opacity_threshold: Option<f64>,
    /// Also write a PLY copy at full precision.
    #[arg(long)]
    ply: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PathArg {
    Circular,
    ForwardFacing,
    Spline,
}

impl From<PathArg> for PathKind {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::Circular => PathKind::Circular,
            PathArg::ForwardFacing => PathKind::ForwardFacing,
            PathArg::Spline => PathKind::Spline,
        }
    }
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    asset: PathBuf,
    /// Output directory for PNG frames.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tile_size: Option<usize>,
    /// Render along a generated path instead of the manifest views.
    #[arg(long, value_enum)]
    path: Option<PathArg>,
    /// Number of path views.
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    Source,
    Heldout,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    asset: PathBuf,
    #[arg(long, value_enum, default_value = "heldout")]
    role: RoleArg,
    #[arg(long)]
    tile_size: Option<usize>,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OracleArg {
    Delta,
    Gaussian,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "delta")]
    oracle: OracleArg,
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Delta target, or Gaussian mean, in every dimension.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    target: f64,
    /// Gaussian oracle variance.
    #[arg(long, default_value_t = 0.5)]
    variance: f64,
    #[arg(long)]
    samples: Option<usize>,
    /// Keep the schedule's own terminal SNR instead of rescaling it to zero.
    #[arg(long)]
    no_zero_snr: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn synthesize(args: SynthesizeArgs, cfg: &FileConfig) -> Result<()> {
    let defaults = SynthesizeOptions::default();
    let opts = SynthesizeOptions {
        seed: pick(args.seed, cfg.seed, defaults.seed),
        resolution: pick(args.resolution, cfg.resolution, DEFAULT_RESOLUTION),
        views: pick(args.views, cfg.views, DEFAULT_NUM_VIEWS),
        heldout: pick(args.heldout, cfg.heldout, defaults.heldout),
        complexity: pick(args.complexity, cfg.complexity, defaults.complexity),
        ..defaults
    };
    let manifest = pipeline::synthesize(&opts, &args.out)?;
    log::info!("wrote {} views to {}", manifest.views.len(), args.out.display());
    Ok(())
}

fn reconstruct(args: ReconstructArgs, cfg: &FileConfig) -> Result<()> {
    let mut manifest = read_manifest(&args.manifest)?;
    let dir = manifest_dir(&args.manifest);
    let defaults = ReconstructOptions::default();
    let opts = ReconstructOptions {
        opacity_threshold: pick(
            args.opacity_threshold,
            cfg.opacity_threshold,
            defaults.opacity_threshold,
        ),
        ..defaults
    };
    let r = pipeline::reconstruct(&manifest, &dir, &opts)?;
    if r.scene.is_empty() {
        bail!(
            "every Gaussian was culled at opacity threshold {}",
            opts.opacity_threshold
        );
    }
    export_splat(&r.scene, &args.out)?;
    if let Some(ply) = &args.ply {
        export_ply(&r.scene, ply)?;
    }
    eprintln!(
        "{} gaussians ({} before culling) from {} views in {:.3} s",
        r.scene.len(),
        r.merged,
        r.views,
        r.seconds
    );
    // Record the asset in the manifest when it lives next to it.
    let out_abs = fs::canonicalize(&args.out)?;
    if let Ok(rel) = out_abs.strip_prefix(fs::canonicalize(&dir)?) {
        if !manifest.assets.iter().any(|a| a == rel) {
            manifest.assets.push(rel.to_path_buf());
            write_manifest(&manifest, &args.manifest)?;
        }
    }
    Ok(())
}

fn render(args: RenderArgs, cfg: &FileConfig) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let scene = import_splat(&args.asset)?;
    let tile = pick(args.tile_size, cfg.tile_size, DEFAULT_TILE_SIZE);
    if tile == 0 {
        bail!("tile size must be at least 1");
    }
    let cameras = match args.path {
        Some(kind) => pipeline::path_cameras(&manifest, kind.into(), pick(args.views, cfg.views, DEFAULT_NUM_VIEWS))?,
        None => manifest.views.iter().map(|v| v.camera).collect(),
    };
    fs::create_dir_all(&args.out)?;
    for (i, cam) in cameras.iter().enumerate() {
        let img = pipeline::render_view(&scene, cam, tile, manifest.scene.background);
        img.color.write_png(args.out.join(format!("frame_{i:03}.png")))?;
    }
    eprintln!("rendered {} frames to {}", cameras.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs, cfg: &FileConfig) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let scene = import_splat(&args.asset)?;
    let role = match args.role {
        RoleArg::Source => Some(ViewRole::Source),
        RoleArg::Heldout => Some(ViewRole::Heldout),
        RoleArg::All => None,
    };
    let tile = pick(args.tile_size, cfg.tile_size, DEFAULT_TILE_SIZE);
    let records = pipeline::evaluate(&manifest, &manifest_dir(&args.manifest), &scene, role, tile)?;
    let mut out = output(args.out.as_deref())?;
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn sampler_demo(args: SamplerArgs, cfg: &FileConfig) -> Result<()> {
    let defaults = SamplerOptions::default();
    let schedule = match args.schedule.as_deref().or(cfg.schedule.as_deref()) {
        Some(s) => s.parse::<ScheduleKind>()?,
        None => defaults.schedule,
    };
    let oracle = match args.oracle {
        OracleArg::Delta => OracleSpec::Delta {
            target: vec![args.target; args.dim],
        },
        OracleArg::Gaussian => OracleSpec::Gaussian {
            mean: vec![args.target; args.dim],
            variance: args.variance,
        },
    };
    let opts = SamplerOptions {
        schedule,
        zero_terminal_snr: !args.no_zero_snr,
        steps: pick(args.steps, cfg.steps, DEFAULT_SAMPLE_STEPS),
        eta: pick(args.eta, cfg.eta, defaults.eta),
        seed: pick(args.seed, cfg.seed, defaults.seed),
        samples: pick(args.samples, cfg.samples, defaults.samples),
        oracle,
        ..defaults
    };
    let report = pipeline::sampler_demo(&opts)?;
    if let Some(err) = report.terminal_error {
        eprintln!("terminal error {err:.3e}");
    }
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synthesize(a) => synthesize(a, &cfg),
        Command::Reconstruct(a) => reconstruct(a, &cfg),
        Command::Render(a) => render(a, &cfg),
        Command::Eval(a) => eval(a, &cfg),
        Command::SamplerDemo(a) => sampler_demo(a, &cfg),
    }
}
