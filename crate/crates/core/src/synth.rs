//! Procedural scenes and camera-path heuristics.
//!
//! Scenes are built in the frame of the default camera (identity pose, 60°
//! field of view), so every primitive can be placed inside its frustum.
//! Camera paths are generated in the normalized first-camera frame, where
//! the scene center defaults to `(0, 0, 1)`.

use std::f64::consts::TAU;
use std::str::FromStr;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, CameraIntrinsics, CameraPose, GeometryError, Vec3};
use crate::render::{Primitive, SyntheticScene};

pub const DEFAULT_FOV_Y: f64 = 60.0;
pub const DEFAULT_NUM_VIEWS: usize = 16;

/// Depth range, in default-camera units, where scene objects are placed.
const OBJECT_DEPTH: (f64, f64) = (1.5, 3.8);
const BACKDROP_DEPTH: f64 = 4.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("unknown camera path kind {0:?} (expected circular, forward-facing or spline)")]
    UnknownPathKind(String),
    #[error("a camera path needs at least one view")]
    NoViews,
    #[error("this path kind needs at least one input camera")]
    NoInputCameras,
    #[error("path up vector must be non-zero and finite")]
    InvalidUp,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Square camera at the origin looking down +z.
pub fn default_camera(resolution: usize) -> Result<Camera, GeometryError> {
    Ok(Camera::new(
        CameraIntrinsics::from_fov_y(resolution, resolution, DEFAULT_FOV_Y)?,
        CameraPose::identity(),
    ))
}

fn random_albedo(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(0.15..0.95))
}

/// Seeded procedural scene. Complexity 0 is a single sphere; each further
/// level adds one sphere or box in front of an opaque backdrop wall, so the
/// depth map has discontinuities at every object silhouette.
pub fn generate_scene(seed: u64, complexity: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_fov = (DEFAULT_FOV_Y.to_radians() / 2.0).tan();
    let place = |rng: &mut ChaCha8Rng| {
        let z = rng.random_range(OBJECT_DEPTH.0..OBJECT_DEPTH.1);
        let x = z * half_fov * rng.random_range(-0.6..0.6);
        let y = z * half_fov * rng.random_range(-0.6..0.6);
        Vec3::new(x, y, z)
    };
    let background = Vec3::repeat(rng.random_range(0.0..0.1));
    if complexity == 0 {
        let center = place(&mut rng);
        return SyntheticScene {
            primitives: vec![Primitive::Sphere {
                center,
                radius: rng.random_range(0.3..0.6),
                albedo: random_albedo(&mut rng),
            }],
            background,
        };
    }
    let mut primitives = vec![Primitive::Box {
        center: Vec3::new(0.0, 0.0, BACKDROP_DEPTH),
        half_extents: Vec3::new(8.0, 8.0, 0.05),
        albedo: random_albedo(&mut rng),
    }];
    for _ in 0..complexity {
        let center = place(&mut rng);
        let albedo = random_albedo(&mut rng);
        primitives.push(if rng.random_bool(0.5) {
            Primitive::Sphere {
                center,
                radius: rng.random_range(0.15..0.45),
                albedo,
            }
        } else {
            Primitive::Box {
                center,
                half_extents: Vec3::from_fn(|_, _| rng.random_range(0.12..0.4)),
                albedo,
            }
        });
    }
    SyntheticScene { primitives, background }
}

/// `count` cameras on a horizontal arc through the origin, all looking at
/// `(0, 0, target_depth)`. The middle of the arc is the default camera, and
/// the first returned camera is always the identity pose.
pub fn arc_cameras(intrinsics: CameraIntrinsics, count: usize, target_depth: f64, arc_degrees: f64) -> Vec<Camera> {
    let target = Vec3::new(0.0, 0.0, target_depth);
    let half = arc_degrees.to_radians() / 2.0;
    (0..count)
        .map(|i| {
            // Order 0, +1, −1, +2, −2, ... steps so the first view is frontal.
            let step = i.div_ceil(2);
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            let max_step = count.div_ceil(2).max(1) as f64;
            let theta = sign * half * step as f64 / max_step;
            if step == 0 {
                return Camera::new(intrinsics, CameraPose::identity());
            }
            let eye = target + Vec3::new(-theta.sin(), 0.0, -theta.cos()) * target_depth;
            Camera::new(intrinsics, CameraPose::look_at(eye, target, -Vec3::y()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Circular,
    ForwardFacing,
    Spline,
}

impl FromStr for PathKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "circular" => Ok(PathKind::Circular),
            "forward-facing" => Ok(PathKind::ForwardFacing),
            "spline" => Ok(PathKind::Spline),
            other => Err(SynthError::UnknownPathKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// Axis of circular paths. Cameras are oriented so that `−up` points to
    /// the top of the image (camera y points down).
    pub up: Vec3,
    /// Look-at point of circular paths.
    pub center: Vec3,
    /// Amplitude of forward-facing offsets, in scene units.
    pub offset_scale: f64,
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            up: Vec3::y(),
            center: Vec3::new(0.0, 0.0, 1.0),
            offset_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub kind: PathKind,
    pub poses: Vec<CameraPose>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Camera poses for target views. `input` must be non-empty for every kind.
pub fn sample_camera_path(
    kind: PathKind,
    input: &[CameraPose],
    num_views: usize,
    params: &PathParams,
) -> Result<CameraPath, SynthError> {
    if num_views == 0 {
        return Err(SynthError::NoViews);
    }
    if input.is_empty() {
        return Err(SynthError::NoInputCameras);
    }
    let poses = match kind {
        PathKind::Circular => circular_path(input, num_views, params)?,
        PathKind::ForwardFacing => forward_facing_path(&input[0], num_views, params.offset_scale),
        PathKind::Spline => spline_path(input, num_views),
    };
    for p in &poses {
        p.validate()?;
    }
    Ok(CameraPath { kind, poses })
}

fn circular_path(input: &[CameraPose], n: usize, params: &PathParams) -> Result<Vec<CameraPose>, SynthError> {
    let norm = params.up.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(SynthError::InvalidUp);
    }
    let axis = params.up / norm;
    let center = params.center;
    let split = |p: &CameraPose| {
        let d = p.center() - center;
        let h = d.dot(&axis);
        (h, d - axis * h)
    };
    let (mut heights, mut radii): (Vec<f64>, Vec<f64>) = input
        .iter()
        .map(|p| {
            let (h, radial) = split(p);
            (h, radial.norm())
        })
        .unzip();
    let height = median(&mut heights);
    let radius = median(&mut radii);

    let (_, first_radial) = split(&input[0]);
    let e1 = if first_radial.norm() > 1e-12 {
        first_radial.normalize()
    } else {
        // First camera sits on the axis: start from any perpendicular.
        let seed = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
        (seed - axis * seed.dot(&axis)).normalize()
    };
    let e2 = axis.cross(&e1);
    Ok((0..n)
        .map(|k| {
            let theta = TAU * k as f64 / n as f64;
            let eye = center + axis * height + (e1 * theta.cos() + e2 * theta.sin()) * radius;
            if (eye - center).norm() < 1e-12 {
                CameraPose {
                    rotation: input[0].rotation,
                    translation: eye,
                }
            } else {
                CameraPose::look_at(eye, center, -axis)
            }
        })
        .collect())
}

/// Small figure-eight of lateral offsets with a gentle dolly, expressed in
/// the first camera's frame; orientation is held fixed.
fn forward_facing_path(first: &CameraPose, n: usize, scale: f64) -> Vec<CameraPose> {
    (0..n)
        .map(|k| {
            let t = TAU * k as f64 / n as f64;
            let local = Vec3::new(t.sin(), 0.5 * (2.0 * t).sin(), 0.5 * (1.0 - t.cos())) * scale;
            CameraPose {
                rotation: first.rotation,
                translation: first.translation + first.rotation * local,
            }
        })
        .collect()
}

/// Centripetal Catmull-Rom through the camera centers, with rotations
/// slerped between consecutive inputs. Samples are uniform in the segment
/// parameter, so with `n = (m − 1)·k + 1` every input camera is hit exactly.
fn spline_path(input: &[CameraPose], n: usize) -> Vec<CameraPose> {
    let m = input.len();
    if m == 1 {
        return vec![input[0]; n];
    }
    let centers: Vec<Vec3> = input.iter().map(|p| p.center()).collect();
    let quats: Vec<UnitQuaternion<f64>> = input
        .iter()
        .map(|p| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation)))
        .collect();
    let point = |i: isize| -> Vec3 {
        if i < 0 {
            centers[0] * 2.0 - centers[1]
        } else if i as usize >= m {
            centers[m - 1] * 2.0 - centers[m - 2]
        } else {
            centers[i as usize]
        }
    };
    (0..n)
        .map(|k| {
            let s = if n == 1 {
                0.0
            } else {
                k as f64 * (m - 1) as f64 / (n - 1) as f64
            };
            let seg = (s.floor() as usize).min(m - 2);
            let local = s - seg as f64;
            let i = seg as isize;
            let translation = if local == 0.0 {
                centers[seg]
            } else if local == 1.0 {
                centers[seg + 1]
            } else {
                centripetal_catmull_rom([point(i - 1), point(i), point(i + 1), point(i + 2)], local)
            };
            let (q0, q1) = (quats[seg], quats[seg + 1]);
            let q = q0
                .try_slerp(&q1, local, 1e-12)
                .unwrap_or(if local < 0.5 { q0 } else { q1 });
            CameraPose {
                rotation: q.to_rotation_matrix().into_inner(),
                translation,
            }
        })
        .collect()
}

/// Barry–Goldman evaluation between `p[1]` (`t = 0`) and `p[2]` (`t = 1`).
fn centripetal_catmull_rom(p: [Vec3; 4], t: f64) -> Vec3 {
    let knot = |a: &Vec3, b: &Vec3| (b - a).norm().sqrt().max(1e-9);
    let t0 = 0.0;
    let t1 = t0 + knot(&p[0], &p[1]);
    let t2 = t1 + knot(&p[1], &p[2]);
    let t3 = t2 + knot(&p[2], &p[3]);
    let t = t1 + (t2 - t1) * t;
    let lerp = |a: &Vec3, b: &Vec3, ta: f64, tb: f64| a * ((tb - t) / (tb - ta)) + b * ((t - ta) / (tb - ta));
    let a1 = lerp(&p[0], &p[1], t0, t1);
    let a2 = lerp(&p[1], &p[2], t1, t2);
    let a3 = lerp(&p[2], &p[3], t2, t3);
    let b1 = lerp(&a1, &a2, t0, t2);
    let b2 = lerp(&a2, &a3, t1, t3);
    lerp(&b1, &b2, t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::raytrace_synthetic;

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(generate_scene(7, 4), generate_scene(7, 4));
        assert_ne!(generate_scene(7, 4), generate_scene(8, 4));
    }

    #[test]
    fn complexity_zero_is_one_sphere() {
        for seed in 0..10 {
            let s = generate_scene(seed, 0);
            assert_eq!(s.primitives.len(), 1);
            assert!(matches!(s.primitives[0], Primitive::Sphere { .. }));
        }
    }

    #[test]
    fn every_primitive_is_seen_by_the_default_camera() {
        let cam = default_camera(32).unwrap();
        for seed in 0..20 {
            let scene = generate_scene(seed, 5);
            assert_eq!(scene.primitives.len(), 6);
            for p in &scene.primitives {
                assert!(p.is_valid());
                // Oracle: ray-trace the primitive on its own.
                let alone = SyntheticScene {
                    primitives: vec![p.clone()],
                    background: scene.background,
                };
                let (_, depth) = raytrace_synthetic(&alone, &cam);
                assert!(depth.valid.iter().any(|&b| b), "seed {seed}: {p:?} outside frustum");
            }
        }
    }

    #[test]
    fn backdrop_makes_scenes_opaque() {
        let cams = arc_cameras(CameraIntrinsics::from_fov_y(24, 24, 60.0).unwrap(), 5, 2.75, 40.0);
        let scene = generate_scene(3, 3);
        for cam in &cams {
            let (_, depth) = raytrace_synthetic(&scene, cam);
            assert!(depth.valid.iter().all(|&b| b));
        }
    }

    #[test]
    fn arc_starts_at_identity() {
        let k = CameraIntrinsics::from_fov_y(8, 8, 60.0).unwrap();
        let cams = arc_cameras(k, 5, 2.0, 40.0);
        assert_eq!(cams[0].pose, CameraPose::identity());
        for c in &cams {
            c.pose.validate().unwrap();
            // Each camera looks at the target.
            let t = c.pose.inverse_transform_point(&Vec3::new(0.0, 0.0, 2.0));
            assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && (t.z - 2.0).abs() < 1e-12);
        }
        assert!((cams[1].pose.center().x + cams[2].pose.center().x).abs() < 1e-12);
    }

    #[test]
    fn path_kind_parsing() {
        assert_eq!("forward-facing".parse::<PathKind>().unwrap(), PathKind::ForwardFacing);
        assert!(matches!(
            "helix".parse::<PathKind>(),
            Err(SynthError::UnknownPathKind(_))
        ));
    }

    fn ring(radii: &[f64]) -> Vec<CameraPose> {
        radii
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let a = i as f64;
                let eye = Vec3::new(r * a.cos(), 0.3 * a, 1.0 + r * a.sin());
                CameraPose::look_at(eye, Vec3::new(0.0, 0.0, 1.0), -Vec3::y())
            })
            .collect()
    }

    #[test]
    fn circular_unit_radius_spacing() {
        let input = ring(&[1.0]);
        let path = sample_camera_path(PathKind::Circular, &input, 16, &PathParams::default()).unwrap();
        assert_eq!(path.poses.len(), 16);
        let c = Vec3::new(0.0, 0.0, 1.0);
        let radial: Vec<Vec3> = path
            .poses
            .iter()
            .map(|p| {
                let d = p.center() - c;
                Vec3::new(d.x, 0.0, d.z)
            })
            .collect();
        for (i, r) in radial.iter().enumerate() {
            assert!((r.norm() - 1.0).abs() < 1e-9);
            let next = radial[(i + 1) % 16];
            let angle = r.normalize().dot(&next.normalize()).clamp(-1.0, 1.0).acos();
            assert!((angle.to_degrees() - 22.5).abs() < 1e-9);
        }
        // First camera keeps the input azimuth and every camera faces the center.
        assert!((path.poses[0].center() - input[0].center()).norm() < 1e-9);
        for p in &path.poses {
            let local = p.inverse_transform_point(&c);
            assert!(local.x.abs() < 1e-9 && local.y.abs() < 1e-9 && local.z > 0.0);
        }
    }

    #[test]
    fn circular_uses_median_radius_and_height() {
        let input = ring(&[1.0, 2.0, 10.0]);
        let path = sample_camera_path(PathKind::Circular, &input, 8, &PathParams::default()).unwrap();
        for p in &path.poses {
            let d = p.center() - Vec3::new(0.0, 0.0, 1.0);
            assert!((Vec3::new(d.x, 0.0, d.z).norm() - 2.0).abs() < 1e-9);
            assert!((d.y - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn circular_is_rotation_equivariant() {
        let input = ring(&[1.5, 2.0, 1.0, 3.0]);
        let params = PathParams::default();
        let rot = Rotation3::from_axis_angle(&Vec3::y_axis(), 0.7);
        let c = params.center;
        let rotate = |p: &CameraPose| CameraPose {
            rotation: rot.matrix() * p.rotation,
            translation: c + rot * (p.translation - c),
        };
        let rotated: Vec<_> = input.iter().map(rotate).collect();
        let a = sample_camera_path(PathKind::Circular, &input, 12, &params).unwrap();
        let b = sample_camera_path(PathKind::Circular, &rotated, 12, &params).unwrap();
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            let expected = rotate(pa);
            assert!((expected.translation - pb.translation).amax() < 1e-9);
            assert!((expected.rotation - pb.rotation).amax() < 1e-9);
        }
    }

    #[test]
    fn forward_facing_zero_offset_is_identity() {
        let params = PathParams {
            offset_scale: 0.0,
            ..PathParams::default()
        };
        let path = sample_camera_path(PathKind::ForwardFacing, &[CameraPose::identity()], 16, &params).unwrap();
        assert!(path.poses.iter().all(|p| *p == CameraPose::identity()));
        let path = sample_camera_path(
            PathKind::ForwardFacing,
            &[CameraPose::identity()],
            16,
            &PathParams::default(),
        )
        .unwrap();
        assert_eq!(path.poses[0], CameraPose::identity());
        assert!(path.poses.iter().all(|p| p.center().norm() <= 0.1 * 1.5 + 1e-12));
    }

    #[test]
    fn spline_interpolates_inputs() {
        let input = ring(&[1.0, 1.2, 0.8, 1.1]);
        let path = sample_camera_path(PathKind::Spline, &input, 7, &PathParams::default()).unwrap();
        for (j, p) in input.iter().enumerate() {
            let q = &path.poses[2 * j];
            assert!((q.center() - p.center()).norm() < 1e-12);
            assert!((q.rotation - p.rotation).amax() < 1e-9);
        }
        // Dense sampling is continuous: no jumps between neighbors.
        let dense = sample_camera_path(PathKind::Spline, &input, 301, &PathParams::default()).unwrap();
        let max_step = dense
            .poses
            .windows(2)
            .map(|w| (w[0].center() - w[1].center()).norm())
            .fold(0.0, f64::max);
        assert!(max_step < 0.05, "{max_step}");
    }

    #[test]
    fn spline_handles_repeated_and_single_cameras() {
        let p = CameraPose::from_translation(Vec3::new(0.1, 0.2, 0.3));
        let path = sample_camera_path(PathKind::Spline, &[p, p, p], 5, &PathParams::default()).unwrap();
        assert!(path.poses.iter().all(|q| (q.center() - p.center()).norm() < 1e-9));
        let path = sample_camera_path(PathKind::Spline, &[p], 3, &PathParams::default()).unwrap();
        assert_eq!(path.poses, vec![p; 3]);
    }

    #[test]
    fn path_errors() {
        let id = [CameraPose::identity()];
        let p = PathParams::default();
        assert_eq!(
            sample_camera_path(PathKind::Circular, &id, 0, &p),
            Err(SynthError::NoViews)
        );
        assert_eq!(
            sample_camera_path(PathKind::Spline, &[], 4, &p),
            Err(SynthError::NoInputCameras)
        );
        let bad = PathParams { up: Vec3::zeros(), ..p };
        assert_eq!(
            sample_camera_path(PathKind::Circular, &id, 4, &bad),
            Err(SynthError::InvalidUp)
        );
    }
}
