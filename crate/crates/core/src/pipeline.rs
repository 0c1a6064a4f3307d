//! End-to-end steps: synthesize a dataset, reconstruct a Gaussian asset from
//! its source views, render and evaluate it, and run the diffusion sampler
//! on analytic oracles.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{
    read_pointmap, write_manifest, write_pointmap, AssetError, PathRecord, SceneManifest, ViewRecord, ViewRole,
    MANIFEST_VERSION,
};
use crate::diffusion::{
    make_schedule, rescale_zero_terminal_snr, sample, sample_trajectory, sampling_timesteps, DeltaOracle,
    DenoiserOracle, DiffusionError, GaussianMixture, ScheduleKind, DEFAULT_SAMPLE_STEPS, DEFAULT_TRAIN_STEPS,
};
use crate::geometry::{
    normalize_scene, unproject_depth, Camera, CameraIntrinsics, DepthMap, GeometryError, Pointmap, Vec3,
};
use crate::metrics::{self, MetricError, ViewMetrics, DELTA_EPSILON};
use crate::pixels::{ColorImage, PixelError};
use crate::render::{raytrace_synthetic, render_tiled, RenderOptions, RenderedImage, SyntheticScene};
use crate::splat::{
    analytic_gaussian_head, calibrate_pointmap, cull_transparent, merge_splatter_images, GaussianScene, HeadParams,
    SplatError,
};
use crate::synth::{arc_cameras, generate_scene, sample_camera_path, PathKind, PathParams, SynthError, DEFAULT_FOV_Y};

/// Version tag carried by every evaluation record.
pub const EVAL_SCHEMA: &str = "splatgen.eval/1";
pub const DEFAULT_TILE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pixel(#[from] PixelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("manifest has no {0:?} views")]
    NoViews(ViewRole),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeOptions {
    pub seed: u64,
    pub resolution: usize,
    /// Source views, on an arc facing the scene.
    pub views: usize,
    /// Held-out views, taken between neighboring source views.
    pub heldout: usize,
    pub complexity: usize,
    pub arc_degrees: f64,
    /// Depth of the look-at point of the arc, in original scene units.
    pub target_depth: f64,
}

impl Default for SynthesizeOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 512,
            views: 16,
            heldout: 2,
            complexity: 4,
            arc_degrees: 40.0,
            target_depth: 3.0,
        }
    }
}

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(msg.to_owned()))
    }
}

/// Ray-traced image and ground-truth pointmap for a camera in the original frame.
fn observe(scene: &SyntheticScene, camera: &Camera) -> Result<(ColorImage, Pointmap)> {
    let (image, depth) = raytrace_synthetic(scene, camera);
    let pointmap = unproject_depth(&camera.intrinsics, &camera.pose, &depth)?;
    Ok((image.color, pointmap))
}

/// Generates a procedural scene, ray-traces source and held-out views and
/// writes images, pointmaps and `manifest.json` to `out_dir`. Everything
/// written is expressed in the normalized frame of the first source camera.
pub fn synthesize(opts: &SynthesizeOptions, out_dir: &Path) -> Result<SceneManifest> {
    ensure(opts.resolution >= 8, "resolution must be at least 8")?;
    ensure(opts.views >= 1, "at least one source view is required")?;
    ensure(
        opts.target_depth > 0.0 && opts.arc_degrees.is_finite(),
        "arc needs a positive target depth",
    )?;
    fs::create_dir_all(out_dir)?;
    let scene = generate_scene(opts.seed, opts.complexity);
    let intrinsics = CameraIntrinsics::from_fov_y(opts.resolution, opts.resolution, DEFAULT_FOV_Y)?;
    let cameras = arc_cameras(intrinsics, opts.views, opts.target_depth, opts.arc_degrees);

    let mut images = Vec::with_capacity(cameras.len());
    let mut pointmaps = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let (img, pm) = observe(&scene, cam)?;
        images.push(img);
        pointmaps.push(pm);
    }
    let poses: Vec<_> = cameras.iter().map(|c| c.pose).collect();
    let (poses, pointmaps, normalization) = normalize_scene(&poses, &pointmaps)?;
    let mut views: Vec<(Camera, ViewRole, ColorImage, Pointmap)> = poses
        .iter()
        .zip(images)
        .zip(pointmaps)
        .map(|((pose, img), pm)| (Camera::new(intrinsics, *pose), ViewRole::Source, img, pm))
        .collect();

    // Held-out cameras are the midpoints of a spline through the source
    // cameras ordered along the arc.
    let mut path = None;
    if opts.heldout > 0 && poses.len() > 1 {
        let mut ordered = poses.clone();
        ordered.sort_by(|a, b| a.center().x.total_cmp(&b.center().x));
        let num_views = 2 * (ordered.len() - 1) + 1;
        let params = PathParams::default();
        let spline = sample_camera_path(PathKind::Spline, &ordered, num_views, &params)?;
        let mids: Vec<_> = spline.poses.iter().skip(1).step_by(2).copied().collect();
        let take = opts.heldout.min(mids.len());
        for k in 0..take {
            let pose = mids[k * mids.len() / take];
            let original = Camera::new(intrinsics, normalization.invert_pose(&pose));
            let (img, pm) = observe(&scene, &original)?;
            let pm = pm.map_points(|p| normalization.apply_point(p));
            views.push((Camera::new(intrinsics, pose), ViewRole::Heldout, img, pm));
        }
        path = Some(PathRecord {
            kind: PathKind::Spline,
            num_views,
            params,
        });
    }

    let mut records = Vec::with_capacity(views.len());
    for (i, (camera, role, img, pm)) in views.into_iter().enumerate() {
        let image = PathBuf::from(format!("view_{i:03}.png"));
        let pointmap = PathBuf::from(format!("view_{i:03}.pointmap"));
        img.write_png(out_dir.join(&image))?;
        write_pointmap(&pm, out_dir.join(&pointmap))?;
        records.push(ViewRecord {
            camera,
            role,
            image,
            pointmap,
        });
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        scene,
        normalization,
        views: records,
        path,
        assets: Vec::new(),
    };
    write_manifest(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub opacity_threshold: f64,
    pub head: HeadParams,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            opacity_threshold: 0.05,
            head: HeadParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub scene: GaussianScene,
    pub views: usize,
    /// Gaussians before culling.
    pub merged: usize,
    pub seconds: f64,
}

/// Loads the image and pointmap of every view with `role`.
pub fn load_views(manifest: &SceneManifest, dir: &Path, role: ViewRole) -> Result<Vec<(Camera, ColorImage, Pointmap)>> {
    let out = manifest
        .views_with_role(role)
        .map(|v| {
            let image = ColorImage::read_png(dir.join(&v.image))?;
            let pointmap = read_pointmap(dir.join(&v.pointmap))?;
            Ok((v.camera, image, pointmap))
        })
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(PipelineError::NoViews(role));
    }
    Ok(out)
}

/// Calibrate → analytic head → merge → cull over the manifest's source views.
pub fn reconstruct(manifest: &SceneManifest, dir: &Path, opts: &ReconstructOptions) -> Result<Reconstruction> {
    let start = Instant::now();
    let views = load_views(manifest, dir, ViewRole::Source)?;
    let mut cameras = Vec::with_capacity(views.len());
    let mut images = Vec::with_capacity(views.len());
    let mut pointmaps = Vec::with_capacity(views.len());
    for (camera, image, pointmap) in views {
        pointmaps.push(calibrate_pointmap(&pointmap, &camera)?);
        cameras.push(camera);
        images.push(image);
    }
    let splatter = analytic_gaussian_head(&images, &pointmaps, &cameras, &opts.head)?;
    let merged = merge_splatter_images(&splatter);
    let scene = cull_transparent(&merged, opts.opacity_threshold);
    let seconds = start.elapsed().as_secs_f64();
    log::info!(
        "reconstructed {} gaussians ({} before culling) from {} views in {seconds:.3} s",
        scene.len(),
        merged.len(),
        cameras.len()
    );
    Ok(Reconstruction {
        scene,
        views: cameras.len(),
        merged: merged.len(),
        seconds,
    })
}

pub fn render_view(scene: &GaussianScene, camera: &Camera, tile_size: usize, background: Vec3) -> RenderedImage {
    let opts = RenderOptions {
        background,
        with_depth: true,
    };
    render_tiled(scene, camera, tile_size, &opts)
}

/// Cameras along a generated path through the manifest's source cameras.
pub fn path_cameras(manifest: &SceneManifest, kind: PathKind, num_views: usize) -> Result<Vec<Camera>> {
    let sources: Vec<&ViewRecord> = manifest.views_with_role(ViewRole::Source).collect();
    let first = sources.first().ok_or(PipelineError::NoViews(ViewRole::Source))?;
    let poses: Vec<_> = sources.iter().map(|v| v.camera.pose).collect();
    let params = manifest.path.as_ref().map(|p| p.params).unwrap_or_default();
    let path = sample_camera_path(kind, &poses, num_views, &params)?;
    Ok(path
        .poses
        .into_iter()
        .map(|pose| Camera::new(first.camera.intrinsics, pose))
        .collect())
}

/// Finite positive depths of a render as a depth map.
fn rendered_depth(img: &RenderedImage) -> Option<DepthMap> {
    let depth = img.depth.as_ref()?;
    let mut out = DepthMap::new(img.width(), img.height());
    for (i, &z) in depth.iter().enumerate() {
        if z.is_finite() && z > 0.0 {
            out.depth[i] = z;
            out.valid[i] = true;
        }
    }
    Some(out)
}

fn optional(r: Result<f64, MetricError>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::NoValidPixels) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// One line of evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema: String,
    pub view: usize,
    pub role: ViewRole,
    #[serde(flatten)]
    pub metrics: ViewMetrics,
    /// PSNR of an image filled with the ground truth's mean color.
    pub baseline_psnr: f64,
}

/// Metrics for a rendered view against its ground-truth image and pointmap.
/// `duv` measures the ground-truth pointmap itself against the camera.
pub fn view_metrics(
    rendered: &RenderedImage,
    camera: &Camera,
    gt_image: &ColorImage,
    gt_points: &Pointmap,
) -> Result<(ViewMetrics, f64)> {
    let psnr = metrics::psnr(&rendered.color, gt_image)?;
    let ssim = metrics::ssim(&rendered.color, gt_image)?;
    let gt_depth = gt_points.depth_in(&camera.pose);
    let (absrel, delta_1_01) = match rendered_depth(rendered) {
        Some(pred) => (
            optional(metrics::absrel(&pred, &gt_depth))?,
            optional(metrics::delta(&pred, &gt_depth, DELTA_EPSILON))?,
        ),
        None => (None, None),
    };
    let duv = optional(metrics::duv(gt_points, camera))?;
    let (w, h) = gt_image.dims();
    let baseline = metrics::psnr(&ColorImage::filled(w, h, gt_image.mean_color()), gt_image)?;
    Ok((
        ViewMetrics {
            psnr,
            ssim,
            absrel,
            delta_1_01,
            duv,
        },
        baseline,
    ))
}

/// Renders every manifest view with `role` (all views if `None`) and scores
/// it against the ray-traced ground truth.
pub fn evaluate(
    manifest: &SceneManifest,
    dir: &Path,
    scene: &GaussianScene,
    role: Option<ViewRole>,
    tile_size: usize,
) -> Result<Vec<EvalRecord>> {
    ensure(tile_size >= 1, "tile size must be at least 1")?;
    let mut out = Vec::new();
    for (i, v) in manifest.views.iter().enumerate() {
        if role.is_some_and(|r| r != v.role) {
            continue;
        }
        let image = ColorImage::read_png(dir.join(&v.image))?;
        let points = read_pointmap(dir.join(&v.pointmap))?;
        let rendered = render_view(scene, &v.camera, tile_size, manifest.scene.background);
        let (metrics, baseline_psnr) = view_metrics(&rendered, &v.camera, &image, &points)?;
        out.push(EvalRecord {
            schema: EVAL_SCHEMA.to_owned(),
            view: i,
            role: v.role,
            metrics,
            baseline_psnr,
        });
    }
    if out.is_empty() {
        return Err(PipelineError::NoViews(role.unwrap_or(ViewRole::Source)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OracleSpec {
    /// All data at `target`.
    Delta { target: Vec<f64> },
    /// Isotropic Gaussian data.
    Gaussian { mean: Vec<f64>, variance: f64 },
}

impl OracleSpec {
    fn dim(&self) -> usize {
        match self {
            OracleSpec::Delta { target } => target.len(),
            OracleSpec::Gaussian { mean, .. } => mean.len(),
        }
    }

    fn build(&self) -> Result<Box<dyn DenoiserOracle>> {
        Ok(match self {
            OracleSpec::Delta { target } => Box::new(DeltaOracle { target: target.clone() }),
            OracleSpec::Gaussian { mean, variance } => Box::new(GaussianMixture::isotropic(mean, *variance)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub schedule: ScheduleKind,
    pub train_steps: usize,
    pub zero_terminal_snr: bool,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    /// Independent samples drawn for the summary statistics.
    pub samples: usize,
    pub oracle: OracleSpec,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Cosine,
            train_steps: DEFAULT_TRAIN_STEPS,
            zero_terminal_snr: true,
            steps: DEFAULT_SAMPLE_STEPS,
            eta: 0.0,
            seed: 0,
            samples: 1,
            oracle: OracleSpec::Delta {
                target: vec![0.5, -1.0, 2.0],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub options: SamplerOptions,
    pub timesteps: Vec<usize>,
    /// States of the first sample, from the initial noise to the output.
    pub trajectory: Vec<Vec<f64>>,
    /// Per-dimension mean and variance over all samples.
    pub sample_mean: Vec<f64>,
    pub sample_variance: Vec<f64>,
    /// Largest deviation of the first sample from the target (delta oracle only).
    pub terminal_error: Option<f64>,
}

/// Runs DDIM with an analytic oracle. Sample `k` uses seed `seed + k`.
pub fn sampler_demo(opts: &SamplerOptions) -> Result<SamplerReport> {
    ensure(opts.samples >= 1, "at least one sample is required")?;
    let dim = opts.oracle.dim();
    ensure(dim >= 1, "oracle dimension must be at least 1")?;
    let mut schedule = make_schedule(opts.schedule, opts.train_steps)?;
    if opts.zero_terminal_snr {
        schedule = rescale_zero_terminal_snr(&schedule)?;
    }
    let oracle = opts.oracle.build()?;
    let trajectory = sample_trajectory(oracle.as_ref(), &schedule, opts.steps, opts.eta, opts.seed, dim)?;
    let mut finals = vec![trajectory.last().expect("non-empty trajectory").clone()];
    for k in 1..opts.samples as u64 {
        finals.push(sample(
            oracle.as_ref(),
            &schedule,
            opts.steps,
            opts.eta,
            opts.seed.wrapping_add(k),
            dim,
        )?);
    }
    let n = finals.len() as f64;
    let sample_mean: Vec<f64> = (0..dim).map(|j| finals.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sample_variance = (0..dim)
        .map(|j| finals.iter().map(|x| (x[j] - sample_mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    let terminal_error = match &opts.oracle {
        OracleSpec::Delta { target } => Some(
            finals[0]
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        ),
        OracleSpec::Gaussian { .. } => None,
    };
    Ok(SamplerReport {
        options: opts.clone(),
        timesteps: sampling_timesteps(schedule.steps(), opts.steps)?,
        trajectory,
        sample_mean,
        sample_variance,
        terminal_error,
    })
}
