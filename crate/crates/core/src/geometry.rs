//! Pinhole cameras, rigid poses, pointmaps, raymaps, and the scene
//! normalization transforms applied before geometry is encoded.
//!
//! Conventions used throughout the crate:
//!
//! * Camera frame is x right, y down, z forward (OpenCV style).
//! * A [`CameraPose`] maps camera coordinates to scene coordinates.
//! * Pixel `(u, v)` samples its center at `(u + 0.5, v + 0.5)`; projection
//!   returns continuous image coordinates, so the center of pixel `(3, 7)`
//!   projects to `(3.5, 7.5)`.
//! * All arithmetic is `f64`; file formats narrow to `f32`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Tolerance on `‖RᵀR − I‖` accepted for a rotation matrix.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("rotation is not a proper orthonormal matrix (residual {0:e})")]
    InvalidRotation(f64),
    #[error("scene has no views")]
    EmptyScene,
    #[error("expected {expected} pointmaps, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("mean depth {0} is not positive")]
    NonPositiveMeanDepth(f64),
    #[error("scale is undefined: every valid coordinate is zero")]
    DegenerateScale,
    #[error("contracted coordinate {value} at pixel ({u}, {v}) is outside (0, 1)")]
    OutOfContractedRange { u: usize, v: usize, value: f64 },
    #[error("non-positive depth {depth} at pixel ({u}, {v})")]
    NonPositiveDepth { u: usize, v: usize, depth: f64 },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("non-finite value at pixel ({u}, {v})")]
    NonFinite { u: usize, v: usize },
    #[error("buffer length {got} does not match {width}x{height}")]
    BufferLength { width: usize, height: usize, got: usize },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered camera with the given vertical field of view and square pixels.
    pub fn from_fov_y(width: usize, height: usize, fov_y_degrees: f64) -> Result<Self> {
        let f = 0.5 * height as f64 / (0.5 * fov_y_degrees.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image must be at least 1x1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Camera-frame direction `(x/z, y/z, 1)` through the center of pixel `(u, v)`.
    #[inline]
    pub fn pixel_direction(&self, u: usize, v: usize) -> Vec3 {
        Vec3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Continuous image coordinates of a camera-frame point with `z > 0`.
    #[inline]
    pub fn project_camera(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Same camera with every pixel dimension multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: ((self.width as f64 * factor).round() as usize).max(1),
            height: ((self.height as f64 * factor).round() as usize).max(1),
        }
    }
}

/// Rigid camera-to-scene transform.
///
/// Serializes as `{"rotation": [[r00, r01, r02], [..], [..]], "translation": [x, y, z]}`
/// with the rotation row-major; deserialization validates the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<CameraPose> for PoseRepr {
    fn from(p: CameraPose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for CameraPose {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        CameraPose::new(m, Vec3::from(r.translation))
    }
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn orthonormality_residual(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn validate(&self) -> Result<()> {
        let residual = self.orthonormality_residual();
        if !residual.is_finite()
            || residual > ROTATION_TOLERANCE
            || self.rotation.determinant() <= 0.0
            || !self.translation.iter().all(|c| c.is_finite())
        {
            return Err(GeometryError::InvalidRotation(residual));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera frame to scene frame.
    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Scene frame to camera frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }

    #[inline]
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Pose with its translation multiplied by `alpha` (uniform scene scaling).
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            rotation: self.rotation,
            translation: self.translation * alpha,
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the scene direction that
    /// should appear upward in the image (the camera's −y axis).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-12 {
            // Looking along the up vector; any perpendicular will do.
            let alt = if forward.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }
}

/// Intrinsics and pose of one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: CameraPose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.pose.validate()
    }

    pub fn project(&self, point: &Vec3) -> Result<Projection> {
        project_point(&self.intrinsics, &self.pose, point)
    }

    /// Unit scene-frame direction of the ray through the center of pixel `(u, v)`.
    pub fn ray_direction(&self, u: usize, v: usize) -> Vec3 {
        (self.pose.rotation * self.intrinsics.pixel_direction(u, v)).normalize()
    }
}

/// Per-pixel depth along the camera z axis with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, z: f64) -> Self {
        Self {
            width,
            height,
            depth: vec![z; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.depth[i])
    }
}

/// H×W grid of scene points with a validity mask. Invalid entries are ignored
/// by every operation and conventionally hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl Pointmap {
    /// All-invalid pointmap.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            points: vec![Vec3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, points: Vec<Vec3>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if points.len() != n || valid.len() != n {
            return Err(GeometryError::BufferLength {
                width,
                height,
                got: points.len().min(valid.len()),
            });
        }
        let pm = Self {
            width,
            height,
            points,
            valid,
        };
        pm.check_finite()?;
        Ok(pm)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (u, v, p) in self.iter_valid() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::NonFinite { u, v });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<&Vec3> {
        let i = self.index(u, v);
        self.valid[i].then(|| &self.points[i])
    }

    pub fn set(&mut self, u: usize, v: usize, p: Vec3) {
        let i = self.index(u, v);
        self.points[i] = p;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, u: usize, v: usize) {
        let i = self.index(u, v);
        self.points[i] = Vec3::zeros();
        self.valid[i] = false;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Valid entries as `(u, v, point)`.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &Vec3)> + '_ {
        let w = self.width;
        self.points
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, &ok))| ok)
            .map(move |(i, (p, _))| (i % w, i / w, p))
    }

    /// Applies `f` to every valid point.
    pub fn map_points(&self, mut f: impl FnMut(&Vec3) -> Vec3) -> Self {
        let mut out = self.clone();
        for (p, &ok) in out.points.iter_mut().zip(&self.valid) {
            if ok {
                *p = f(p);
            }
        }
        out
    }

    /// Camera-frame depth of each pixel under `pose`.
    pub fn depth_in(&self, pose: &CameraPose) -> DepthMap {
        let mut depth = DepthMap::new(self.width, self.height);
        for (i, (p, &ok)) in self.points.iter().zip(&self.valid).enumerate() {
            if ok {
                depth.depth[i] = pose.inverse_transform_point(p).z;
                depth.valid[i] = true;
            }
        }
        depth
    }

    fn expect_dims(&self, intrinsics: &CameraIntrinsics) -> Result<()> {
        if self.dims() != intrinsics.dims() {
            return Err(GeometryError::DimensionMismatch {
                expected: intrinsics.dims(),
                got: self.dims(),
            });
        }
        Ok(())
    }
}

/// Per-pixel ray origin and unit direction encoding a camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Raymap {
    pub width: usize,
    pub height: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
}

impl Raymap {
    /// The 6-channel encoding `(origin, direction)` of pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> [f64; 6] {
        let i = v * self.width + u;
        let (o, d) = (&self.origins[i], &self.directions[i]);
        [o.x, o.y, o.z, d.x, d.y, d.z]
    }

    pub fn channels(&self) -> Vec<[f64; 6]> {
        (0..self.height)
            .flat_map(|v| (0..self.width).map(move |u| (u, v)))
            .map(|(u, v)| self.ray(u, v))
            .collect()
    }
}

/// Record of the transform taking original scene coordinates to normalized
/// ones: `x_norm = scale · reference⁻¹(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub scale: f64,
    pub reference: CameraPose,
}

impl Default for SceneNormalization {
    fn default() -> Self {
        Self {
            scale: 1.0,
            reference: CameraPose::identity(),
        }
    }
}

impl SceneNormalization {
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.reference.inverse_transform_point(p) * self.scale
    }

    pub fn invert_point(&self, p: &Vec3) -> Vec3 {
        self.reference.transform_point(&(p / self.scale))
    }

    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        self.reference.inverse().compose(pose).scaled(self.scale)
    }

    pub fn invert_pose(&self, pose: &CameraPose) -> CameraPose {
        self.reference.compose(&pose.scaled(1.0 / self.scale))
    }

    /// Normalization equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &SceneNormalization) -> SceneNormalization {
        let next_ref = next.reference.scaled(1.0 / self.scale);
        SceneNormalization {
            scale: self.scale * next.scale,
            reference: self.reference.compose(&next_ref),
        }
    }
}

fn check_aligned(poses: &[CameraPose], pointmaps: &[Pointmap]) -> Result<()> {
    if poses.is_empty() {
        return Err(GeometryError::EmptyScene);
    }
    if poses.len() != pointmaps.len() {
        return Err(GeometryError::CountMismatch {
            expected: poses.len(),
            got: pointmaps.len(),
        });
    }
    Ok(())
}

/// Re-expresses poses and points in the frame of the first camera.
pub fn relativize_scene(
    poses: &[CameraPose],
    pointmaps: &[Pointmap],
) -> Result<(Vec<CameraPose>, Vec<Pointmap>, SceneNormalization)> {
    check_aligned(poses, pointmaps)?;
    let norm = SceneNormalization {
        scale: 1.0,
        reference: poses[0],
    };
    let inv = poses[0].inverse();
    let mut out_poses: Vec<CameraPose> = poses.iter().map(|p| inv.compose(p)).collect();
    // Exact identity for the reference camera, free of round-off.
    out_poses[0] = CameraPose::identity();
    let out_maps = pointmaps
        .iter()
        .map(|pm| pm.map_points(|p| inv.transform_point(p)))
        .collect();
    Ok((out_poses, out_maps, norm))
}

/// Scales the scene so the mean first-view depth over valid pixels is 1.
pub fn scale_mean_depth(
    poses: &[CameraPose],
    pointmaps: &[Pointmap],
) -> Result<(Vec<CameraPose>, Vec<Pointmap>, SceneNormalization)> {
    check_aligned(poses, pointmaps)?;
    let first = &pointmaps[0];
    let (sum, n) = first.iter_valid().fold((0.0, 0usize), |(s, n), (_, _, p)| {
        (s + poses[0].inverse_transform_point(p).z, n + 1)
    });
    if n == 0 {
        return Err(GeometryError::NoValidPixels);
    }
    let mean = sum / n as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(GeometryError::NonPositiveMeanDepth(mean));
    }
    let alpha = 1.0 / mean;
    let out_poses = poses.iter().map(|p| p.scaled(alpha)).collect();
    let out_maps = pointmaps.iter().map(|pm| pm.map_points(|p| p * alpha)).collect();
    Ok((
        out_poses,
        out_maps,
        SceneNormalization {
            scale: alpha,
            reference: CameraPose::identity(),
        },
    ))
}

/// Relativize to the first camera, then scale to unit mean first-view depth.
pub fn normalize_scene(
    poses: &[CameraPose],
    pointmaps: &[Pointmap],
) -> Result<(Vec<CameraPose>, Vec<Pointmap>, SceneNormalization)> {
    let (poses, maps, rel) = relativize_scene(poses, pointmaps)?;
    let (poses, maps, scale) = scale_mean_depth(&poses, &maps)?;
    Ok((poses, maps, rel.then(&scale)))
}

/// Scales all pointmaps so the largest absolute coordinate is 1.
pub fn scale_max_xyz(pointmaps: &[Pointmap]) -> Result<(Vec<Pointmap>, f64)> {
    let mut any = false;
    let mut max_abs = 0.0f64;
    for pm in pointmaps {
        for (_, _, p) in pm.iter_valid() {
            any = true;
            max_abs = max_abs.max(p.amax());
        }
    }
    if !any {
        return Err(GeometryError::NoValidPixels);
    }
    if !(max_abs > 0.0 && max_abs.is_finite()) {
        return Err(GeometryError::DegenerateScale);
    }
    let alpha = 1.0 / max_abs;
    let out = pointmaps.iter().map(|pm| pm.map_points(|p| p * alpha)).collect();
    Ok((out, alpha))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Per-coordinate sigmoid squashing of every valid point.
pub fn contract(pointmap: &Pointmap) -> Pointmap {
    pointmap.map_points(|p| p.map(sigmoid))
}

/// Inverse of [`contract`]; every valid coordinate must lie strictly in (0, 1).
pub fn uncontract(pointmap: &Pointmap) -> Result<Pointmap> {
    for (u, v, p) in pointmap.iter_valid() {
        if let Some(&value) = p.iter().find(|&&c| !(c > 0.0 && c < 1.0)) {
            return Err(GeometryError::OutOfContractedRange { u, v, value });
        }
    }
    Ok(pointmap.map_points(|p| p.map(logit)))
}

pub fn compute_raymap(intrinsics: &CameraIntrinsics, pose: &CameraPose) -> Raymap {
    let (w, h) = intrinsics.dims();
    let mut directions = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let d = pose.rotation * intrinsics.pixel_direction(u, v);
            directions.push(d.normalize());
        }
    }
    Raymap {
        width: w,
        height: h,
        origins: vec![pose.center(); w * h],
        directions,
    }
}

/// Back-projects a z-depth map through the camera into scene coordinates.
/// Invalid depth pixels yield invalid points.
pub fn unproject_depth(intrinsics: &CameraIntrinsics, pose: &CameraPose, depth: &DepthMap) -> Result<Pointmap> {
    let (w, h) = intrinsics.dims();
    if (depth.width, depth.height) != (w, h) {
        return Err(GeometryError::DimensionMismatch {
            expected: (w, h),
            got: (depth.width, depth.height),
        });
    }
    let mut pm = Pointmap::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let Some(z) = depth.get(u, v) else { continue };
            if !(z > 0.0 && z.is_finite()) {
                return Err(GeometryError::NonPositiveDepth { u, v, depth: z });
            }
            let cam = intrinsics.pixel_direction(u, v) * z;
            pm.set(u, v, pose.transform_point(&cam));
        }
    }
    Ok(pm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

pub fn project_point(intrinsics: &CameraIntrinsics, pose: &CameraPose, point: &Vec3) -> Result<Projection> {
    let cam = pose.inverse_transform_point(point);
    if !(cam.z > 0.0) {
        return Err(GeometryError::BehindCamera(cam.z));
    }
    let (u, v) = intrinsics.project_camera(&cam);
    Ok(Projection { u, v, z: cam.z })
}

/// Reconstruction-loss weight for a ground-truth point in its camera frame.
///
/// With `d` the distance to the local scene center `(0, 0, 1)` and
/// `w = max(1, d²)`, the weight is `(2√w − 1) / w`: the derivative of the
/// unbounded-scene contraction, so points near the center count fully and
/// distant points are down-weighted.
pub fn rec_weight(point_camera_local: &Vec3) -> f64 {
    let d2 = (point_camera_local - Vec3::new(0.0, 0.0, 1.0)).norm_squared();
    let w = d2.max(1.0);
    (2.0 * w.sqrt() - 1.0) / w
}

/// [`rec_weight`] for every pixel of a scene-frame pointmap viewed from `pose`.
/// Invalid pixels get weight 0.
pub fn rec_weights(pointmap: &Pointmap, pose: &CameraPose) -> Vec<f64> {
    pointmap
        .points
        .iter()
        .zip(&pointmap.valid)
        .map(|(p, &ok)| {
            if ok {
                rec_weight(&pose.inverse_transform_point(p))
            } else {
                0.0
            }
        })
        .collect()
}

pub(crate) fn expect_pointmap_dims(pm: &Pointmap, k: &CameraIntrinsics) -> Result<()> {
    pm.expect_dims(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> CameraPose {
        let axis = Unit::new_normalize(Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let r = Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0));
        CameraPose::new(
            r.into_inner(),
            Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        )
        .unwrap()
    }

    fn random_pointmap(rng: &mut impl Rng, w: usize, h: usize) -> Pointmap {
        let mut pm = Pointmap::new(w, h);
        for v in 0..h {
            for u in 0..w {
                if rng.random_bool(0.9) {
                    pm.set(
                        u,
                        v,
                        Vec3::new(
                            rng.random_range(-3.0..3.0),
                            rng.random_range(-3.0..3.0),
                            rng.random_range(0.5..6.0),
                        ),
                    );
                }
            }
        }
        pm
    }

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
        assert!(CameraIntrinsics::from_fov_y(64, 64, 60.0).is_ok());
    }

    #[test]
    fn pose_rejects_reflection_and_skew() {
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(reflect, Vec3::zeros()).is_err());
        let skew = Matrix3::new(1.0, 1e-6, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(skew, Vec3::zeros()).is_err());
    }

    #[test]
    fn look_at_identity_case() {
        let pose = CameraPose::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y());
        assert!((pose.rotation - Matrix3::identity()).norm() < 1e-12);
        pose.validate().unwrap();
    }

    #[test]
    fn relativize_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pm = random_pointmap(&mut rng, 4, 3);
        let (poses, maps, norm) = relativize_scene(&[CameraPose::identity()], std::slice::from_ref(&pm)).unwrap();
        assert_eq!(poses[0], CameraPose::identity());
        assert_eq!(maps[0], pm);
        assert_eq!(norm.scale, 1.0);
    }

    #[test]
    fn relativize_inverse_translation() {
        let first = CameraPose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let mut pm = Pointmap::new(1, 1);
        pm.set(0, 0, Vec3::new(0.0, 0.0, 5.0));
        let (_, maps, _) = relativize_scene(&[first], &[pm]).unwrap();
        assert_eq!(*maps[0].get(0, 0).unwrap(), Vec3::zeros());
    }

    #[test]
    fn relativize_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let poses: Vec<_> = (0..3).map(|_| random_pose(&mut rng)).collect();
            let maps: Vec<_> = (0..3).map(|_| random_pointmap(&mut rng, 5, 4)).collect();
            let (rp, rm, norm) = relativize_scene(&poses, &maps).unwrap();
            assert_eq!(rp[0], CameraPose::identity());
            for (orig, rel) in poses.iter().zip(&rp) {
                let back = norm.invert_pose(rel);
                assert!((back.rotation - orig.rotation).norm() < 1e-9);
                assert!((back.translation - orig.translation).norm() < 1e-9);
            }
            for (orig, rel) in maps.iter().zip(&rm) {
                for ((a, b), &ok) in orig.points.iter().zip(&rel.points).zip(&orig.valid) {
                    if ok {
                        assert!((norm.invert_point(b) - a).norm() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn relativize_errors() {
        assert_eq!(relativize_scene(&[], &[]).unwrap_err(), GeometryError::EmptyScene);
        assert!(matches!(
            relativize_scene(&[CameraPose::identity()], &[]),
            Err(GeometryError::CountMismatch { .. })
        ));
    }

    #[test]
    fn mean_depth_fixture() {
        let mut pm = Pointmap::new(4, 1);
        for (u, z) in [0.5, 1.5, 2.0, 4.0].into_iter().enumerate() {
            pm.set(u, 0, Vec3::new(0.1, -0.2, z));
        }
        let (_, maps, norm) = scale_mean_depth(&[CameraPose::identity()], &[pm]).unwrap();
        assert_eq!(norm.scale, 0.5);
        let mean: f64 = maps[0].iter_valid().map(|(_, _, p)| p.z).sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_depth_unit_scene_unchanged() {
        let pm = unproject_depth(
            &intrinsics(),
            &CameraPose::identity(),
            &DepthMap::constant(128, 128, 1.0),
        )
        .unwrap();
        let (poses, maps, norm) = scale_mean_depth(&[CameraPose::identity()], std::slice::from_ref(&pm)).unwrap();
        assert_eq!(norm.scale, 1.0);
        assert_eq!(maps[0], pm);
        assert_eq!(poses[0], CameraPose::identity());
    }

    #[test]
    fn mean_depth_recomputed_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<_> = (0..2).map(|_| random_pose(&mut rng)).collect();
        // Sampled in each camera's frame with positive z, then moved to the world.
        let maps: Vec<_> = poses
            .iter()
            .map(|pose| random_pointmap(&mut rng, 6, 6).map_points(|p| pose.transform_point(p)))
            .collect();
        let (poses, maps, norm) = normalize_scene(&poses, &maps).unwrap();
        let depth = maps[0].depth_in(&poses[0]);
        let (s, n) = depth
            .depth
            .iter()
            .zip(&depth.valid)
            .filter(|(_, &ok)| ok)
            .fold((0.0, 0), |(s, n), (z, _)| (s + z, n + 1));
        assert!((s / n as f64 - 1.0).abs() < 1e-9);
        assert!(norm.scale > 0.0);
    }

    #[test]
    fn mean_depth_errors() {
        let empty = Pointmap::new(2, 2);
        assert_eq!(
            scale_mean_depth(&[CameraPose::identity()], &[empty]).unwrap_err(),
            GeometryError::NoValidPixels
        );
        let mut behind = Pointmap::new(1, 1);
        behind.set(0, 0, Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            scale_mean_depth(&[CameraPose::identity()], &[behind]),
            Err(GeometryError::NonPositiveMeanDepth(_))
        ));
    }

    #[test]
    fn max_xyz_fixtures() {
        let mut pm = Pointmap::new(2, 1);
        pm.set(0, 0, Vec3::new(1.0, -4.0, 2.0));
        pm.set(1, 0, Vec3::new(0.5, 0.0, 3.0));
        let (out, alpha) = scale_max_xyz(&[pm]).unwrap();
        assert_eq!(alpha, 0.25);
        assert_eq!(*out[0].get(0, 0).unwrap(), Vec3::new(0.25, -1.0, 0.5));

        let mut single = Pointmap::new(1, 1);
        single.set(0, 0, Vec3::new(1.0, 0.0, 0.0));
        let (out, alpha) = scale_max_xyz(&[single.clone()]).unwrap();
        assert_eq!(alpha, 1.0);
        assert_eq!(out[0], single);

        let mut zero = Pointmap::new(1, 1);
        zero.set(0, 0, Vec3::zeros());
        assert_eq!(scale_max_xyz(&[zero]).unwrap_err(), GeometryError::DegenerateScale);
    }

    #[test]
    fn max_xyz_random_recomputed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps: Vec<_> = (0..3).map(|_| random_pointmap(&mut rng, 5, 5)).collect();
        let (out, _) = scale_max_xyz(&maps).unwrap();
        let m = out
            .iter()
            .flat_map(|pm| pm.iter_valid().map(|(_, _, p)| p.amax()))
            .fold(0.0f64, f64::max);
        assert!((m - 1.0).abs() < 1e-9);
    }

    #[test]
    fn contraction_pair() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut pm = Pointmap::new(201, 1);
        for u in 0..201 {
            let x = -10.0 + 0.1 * u as f64;
            pm.set(u, 0, Vec3::new(x, -x, 0.5 * x));
        }
        let back = uncontract(&contract(&pm)).unwrap();
        for (a, b) in pm.points.iter().zip(&back.points) {
            assert!((a - b).amax() < 1e-6);
        }
    }

    #[test]
    fn contraction_saturates() {
        // f64: 1 - sigmoid(20) = 2.06e-9 keeps ~8 significant digits, so the
        // round trip loses 3.59e-8; by 30 the loss passes 1e-3.
        let err20 = (logit(sigmoid(20.0)) - 20.0).abs();
        assert!(err20 > 1e-8 && err20 < 1e-7, "err20 = {err20:e}");
        let err30 = (logit(sigmoid(30.0)) - 30.0).abs();
        assert!(err30 > 1e-3, "err30 = {err30:e}");
        // At f32 storage precision sigmoid(20) is exactly 1 and cannot be inverted.
        assert_eq!(sigmoid(20.0) as f32, 1.0f32);
        let mut pm = Pointmap::new(1, 1);
        pm.set(0, 0, Vec3::new(40.0, 0.0, 0.0));
        assert!(matches!(
            uncontract(&contract(&pm)),
            Err(GeometryError::OutOfContractedRange { .. })
        ));
    }

    #[test]
    fn uncontract_rejects_out_of_range() {
        let mut pm = Pointmap::new(1, 1);
        pm.set(0, 0, Vec3::new(0.5, 1.0, 0.5));
        assert!(uncontract(&pm).is_err());
    }

    #[test]
    fn raymap_fixtures() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.5, 0.5, 1, 1).unwrap();
        let r = compute_raymap(&k, &CameraPose::identity());
        assert_eq!(r.ray(0, 0), [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let pose = CameraPose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let r = compute_raymap(&intrinsics(), &pose);
        assert!(r.origins.iter().all(|o| *o == Vec3::new(1.0, 2.0, 3.0)));
        assert!(r.directions.iter().all(|d| (d.dot(d) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unproject_fixtures() {
        let k = intrinsics();
        let mut depth = DepthMap::new(128, 128);
        depth.depth[64 * 128 + 64] = 2.0;
        depth.valid[64 * 128 + 64] = true;
        let pm = unproject_depth(&k, &CameraPose::identity(), &depth).unwrap();
        let p = pm.get(64, 64).unwrap();
        // Center pixel samples (64.5, 64.5): offset 0.5 px at focal 100 and z 2.
        assert!((p - Vec3::new(0.01, 0.01, 2.0)).norm() < 1e-12);
        assert_eq!(pm.valid_count(), 1);

        let plane = unproject_depth(&k, &CameraPose::identity(), &DepthMap::constant(128, 128, 1.0)).unwrap();
        assert!(plane.iter_valid().all(|(_, _, p)| p.z == 1.0));

        depth.depth[0] = -1.0;
        depth.valid[0] = true;
        assert!(matches!(
            unproject_depth(&k, &CameraPose::identity(), &depth),
            Err(GeometryError::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn projection_fixtures() {
        let k = intrinsics();
        let id = CameraPose::identity();
        let p = project_point(&k, &id, &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((p.u, p.v, p.z), (64.0, 64.0, 2.0));
        let p = project_point(&k, &id, &Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(p.u, 114.0);
        assert!(matches!(
            project_point(&k, &id, &Vec3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera(_))
        ));
    }

    #[test]
    fn unproject_project_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::new(80.0, 90.0, 20.0, 14.0, 40, 30).unwrap();
        let pose = random_pose(&mut rng);
        let mut depth = DepthMap::new(40, 30);
        for i in 0..depth.depth.len() {
            depth.depth[i] = rng.random_range(0.2..20.0);
            depth.valid[i] = true;
        }
        let pm = unproject_depth(&k, &pose, &depth).unwrap();
        for (u, v, p) in pm.iter_valid() {
            let pr = project_point(&k, &pose, p).unwrap();
            assert!((pr.u - (u as f64 + 0.5)).abs() < 1e-6);
            assert!((pr.v - (v as f64 + 0.5)).abs() < 1e-6);
            assert!((pr.z - depth.get(u, v).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn rec_weight_fixtures() {
        assert_eq!(rec_weight(&Vec3::new(0.0, 0.0, 1.0)), 1.0);
        assert_eq!(rec_weight(&Vec3::new(1.0, 0.0, 1.0)), 1.0);
        assert!((rec_weight(&Vec3::new(0.0, 3.0, 1.0)) - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_then_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = SceneNormalization {
            scale: 0.7,
            reference: random_pose(&mut rng),
        };
        let b = SceneNormalization {
            scale: 2.3,
            reference: random_pose(&mut rng),
        };
        let ab = a.then(&b);
        let p = Vec3::new(0.3, -1.2, 4.0);
        assert!((ab.apply_point(&p) - b.apply_point(&a.apply_point(&p))).norm() < 1e-12);
        assert!((ab.invert_point(&ab.apply_point(&p)) - p).norm() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_is_scale_invariant(
                alpha in 0.01f64..100.0,
                x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.5f64..5.0,
                tx in -1.0f64..1.0, ty in -1.0f64..1.0,
            ) {
                let k = intrinsics();
                let pose = CameraPose::from_translation(Vec3::new(tx, ty, -1.0));
                let p = Vec3::new(x, y, z);
                let a = project_point(&k, &pose, &p).unwrap();
                let b = project_point(&k, &pose.scaled(alpha), &(p * alpha)).unwrap();
                prop_assert!((a.u - b.u).abs() < 1e-9 * a.u.abs().max(1.0));
                prop_assert!((a.v - b.v).abs() < 1e-9 * a.v.abs().max(1.0));
            }

            #[test]
            fn rec_weight_monotone_beyond_unit(d1 in 0.0f64..50.0, dd in 0.0f64..50.0) {
                let w1 = rec_weight(&Vec3::new(d1, 0.0, 1.0));
                let w2 = rec_weight(&Vec3::new(d1 + dd, 0.0, 1.0));
                prop_assert!(w2 <= w1 + 1e-15);
                prop_assert!(w1 > 0.0 && w1 <= 1.0);
            }
        }

        #[test]
        fn rec_weight_continuous_at_one() {
            let below = rec_weight(&Vec3::new(1.0 - 1e-9, 0.0, 1.0));
            let above = rec_weight(&Vec3::new(1.0 + 1e-9, 0.0, 1.0));
            assert!((below - above).abs() < 1e-8);
        }
    }
}
