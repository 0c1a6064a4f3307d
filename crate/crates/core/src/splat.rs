//! Splatter Images: one colored 3D Gaussian per pixel of a view.
//!
//! The pipeline here is calibrate → head → merge → cull. Calibration snaps
//! every point onto its pixel ray while keeping its camera-frame depth, which
//! is what makes the Gaussians pixel-aligned; the head then only decides
//! opacity, size, orientation and color.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Camera, GeometryError, Pointmap, Vec3};
use crate::pixels::ColorImage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplatError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("view {view}: image is {image:?} but camera is {camera:?}")]
    DimensionMismatch {
        view: usize,
        image: (usize, usize),
        camera: (usize, usize),
    },
    #[error("got {images} images, {pointmaps} pointmaps and {cameras} cameras")]
    CountMismatch {
        images: usize,
        pointmaps: usize,
        cameras: usize,
    },
    #[error("invalid gaussian: {0}")]
    InvalidGaussian(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vec3,
    pub opacity: f64,
    /// Standard deviations along the rotated principal axes.
    pub scale: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub color: Vec3,
}

impl Gaussian3D {
    /// `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        if !self.mean.iter().all(|c| c.is_finite()) {
            return Err(SplatError::InvalidGaussian("non-finite mean"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(SplatError::InvalidGaussian("opacity outside [0, 1]"));
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(SplatError::InvalidGaussian("scale must be positive"));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(SplatError::InvalidGaussian("rotation is not a unit quaternion"));
        }
        if !self.color.iter().all(|c| c.is_finite()) {
            return Err(SplatError::InvalidGaussian("non-finite color"));
        }
        Ok(())
    }

    /// Same Gaussian in a scene scaled by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            mean: self.mean * alpha,
            scale: self.scale * alpha,
            ..*self
        }
    }
}

/// Where a Gaussian came from: view index and pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplatSource {
    pub view: u32,
    pub u: u32,
    pub v: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatterImage {
    pub camera: Camera,
    /// Row-major, one slot per pixel; `None` marks an invalid pixel.
    pub gaussians: Vec<Option<Gaussian3D>>,
}

impl SplatterImage {
    pub fn width(&self) -> usize {
        self.camera.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.camera.intrinsics.height
    }

    pub fn valid_count(&self) -> usize {
        self.gaussians.iter().flatten().count()
    }
}

/// Flat set of Gaussians. `sources` is either empty (provenance unknown, e.g.
/// after import) or parallel to `gaussians`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    pub sources: Vec<SplatSource>,
}

impl GaussianScene {
    pub fn from_gaussians(gaussians: Vec<Gaussian3D>) -> Self {
        Self {
            gaussians,
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        self.gaussians.iter().try_for_each(Gaussian3D::validate)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            gaussians: self.gaussians.iter().map(|g| g.scaled(alpha)).collect(),
            sources: self.sources.clone(),
        }
    }
}

/// Moves each valid point onto the ray through its pixel center, keeping its
/// camera-frame depth. Points at or behind the camera become invalid.
pub fn calibrate_pointmap(pointmap: &Pointmap, camera: &Camera) -> Result<Pointmap, SplatError> {
    geometry::expect_pointmap_dims(pointmap, &camera.intrinsics)?;
    let mut out = pointmap.clone();
    for v in 0..pointmap.height {
        for u in 0..pointmap.width {
            let Some(p) = pointmap.get(u, v) else { continue };
            let z = camera.pose.inverse_transform_point(p).z;
            if !(z > 0.0) {
                out.invalidate(u, v);
                continue;
            }
            let cam = camera.intrinsics.pixel_direction(u, v) * z;
            out.set(u, v, camera.pose.transform_point(&cam));
        }
    }
    Ok(out)
}

/// Free parameters of the analytic Gaussian head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// Pre-activation opacity; the emitted opacity is `sigmoid(opacity_logit)`.
    pub opacity_logit: f64,
    /// Pre-activation size; the emitted scale is
    /// `exp(log_scale) · z · (1/fx, 1/fy, 1/√(fx·fy))`.
    pub log_scale: f64,
}

// About 0.3 px of standard deviation in the source view: neighboring
// Gaussians barely overlap, so source views render sharply. Larger values
// close gaps in novel views at the cost of blur.
impl Default for HeadParams {
    fn default() -> Self {
        Self {
            opacity_logit: 5.0,
            log_scale: -1.2,
        }
    }
}

/// Rotation whose third axis is the viewing ray and whose first axis is the
/// camera x axis made orthogonal to it.
fn ray_aligned_rotation(camera: &Camera, ray: &Vec3) -> UnitQuaternion<f64> {
    let cam_x = camera.pose.rotation.column(0).into_owned();
    let mut x = cam_x - ray * cam_x.dot(ray);
    if x.norm() < 1e-12 {
        x = camera.pose.rotation.column(1).into_owned();
    }
    let x = x.normalize();
    let y = ray.cross(&x);
    let m = Matrix3::from_columns(&[x, y, *ray]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Closed-form stand-in for a learned Gaussian head. Expects calibrated
/// pointmaps; the Gaussian mean is the point itself.
pub fn analytic_gaussian_head(
    images: &[ColorImage],
    pointmaps: &[Pointmap],
    cameras: &[Camera],
    params: &HeadParams,
) -> Result<Vec<SplatterImage>, SplatError> {
    if images.len() != pointmaps.len() || images.len() != cameras.len() {
        return Err(SplatError::CountMismatch {
            images: images.len(),
            pointmaps: pointmaps.len(),
            cameras: cameras.len(),
        });
    }
    let opacity = geometry::sigmoid(params.opacity_logit);
    let size = params.log_scale.exp();
    images
        .iter()
        .zip(pointmaps)
        .zip(cameras)
        .enumerate()
        .map(|(view, ((image, pointmap), camera))| {
            let k = &camera.intrinsics;
            if image.dims() != k.dims() {
                return Err(SplatError::DimensionMismatch {
                    view,
                    image: image.dims(),
                    camera: k.dims(),
                });
            }
            geometry::expect_pointmap_dims(pointmap, k)?;
            let footprint = Vec3::new(1.0 / k.fx, 1.0 / k.fy, 1.0 / (k.fx * k.fy).sqrt());
            let mut gaussians = Vec::with_capacity(k.width * k.height);
            for v in 0..k.height {
                for u in 0..k.width {
                    let Some(p) = pointmap.get(u, v) else {
                        gaussians.push(None);
                        continue;
                    };
                    let z = camera.pose.inverse_transform_point(p).z;
                    if !(z > 0.0) {
                        gaussians.push(None);
                        continue;
                    }
                    let ray = camera.ray_direction(u, v);
                    gaussians.push(Some(Gaussian3D {
                        mean: *p,
                        opacity,
                        scale: footprint * (size * z),
                        rotation: ray_aligned_rotation(camera, &ray),
                        color: image.get(u, v),
                    }));
                }
            }
            Ok(SplatterImage {
                camera: *camera,
                gaussians,
            })
        })
        .collect()
}

/// Concatenates the valid Gaussians of every view, recording provenance.
pub fn merge_splatter_images(images: &[SplatterImage]) -> GaussianScene {
    let mut scene = GaussianScene::default();
    for (view, img) in images.iter().enumerate() {
        let w = img.width();
        for (i, g) in img.gaussians.iter().enumerate() {
            if let Some(g) = g {
                scene.gaussians.push(*g);
                scene.sources.push(SplatSource {
                    view: view as u32,
                    u: (i % w) as u32,
                    v: (i / w) as u32,
                });
            }
        }
    }
    scene
}

/// Keeps exactly the Gaussians with `opacity >= threshold`, in order.
pub fn cull_transparent(scene: &GaussianScene, threshold: f64) -> GaussianScene {
    let keep: Vec<bool> = scene.gaussians.iter().map(|g| g.opacity >= threshold).collect();
    let gaussians = scene
        .gaussians
        .iter()
        .zip(&keep)
        .filter_map(|(g, &k)| k.then_some(*g))
        .collect();
    let sources = if scene.sources.len() == scene.gaussians.len() {
        scene
            .sources
            .iter()
            .zip(&keep)
            .filter_map(|(s, &k)| k.then_some(*s))
            .collect()
    } else {
        Vec::new()
    };
    GaussianScene { gaussians, sources }
}
