use serde::{Deserialize, Serialize};

use super::{RenderStats, RenderedImage};
use crate::geometry::{Camera, DepthMap, Vec3};
use crate::pixels::ColorImage;

/// Fraction of albedo returned regardless of surface orientation.
pub const AMBIENT: f64 = 0.25;

/// Unit direction towards the distant light, in scene coordinates. Shading
/// does not depend on the viewer, so every view sees the same radiance.
pub const LIGHT_DIRECTION: [f64; 3] = [
    0.267_261_241_912_424_4,
    -0.534_522_483_824_848_8,
    -0.801_783_725_737_273_2,
];

/// Lambertian primitive. Planes are infinite and two-sided; boxes are
/// axis-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: Vec3,
    },
    Plane {
        point: Vec3,
        normal: Vec3,
        albedo: Vec3,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
        albedo: Vec3,
    },
}

impl Primitive {
    pub fn albedo(&self) -> Vec3 {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Plane { albedo, .. } | Primitive::Box { albedo, .. } => {
                *albedo
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            Primitive::Sphere { radius, .. } => *radius > 0.0,
            Primitive::Plane { normal, .. } => normal.norm() > 0.0,
            Primitive::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
        }
    }

    /// Nearest hit `t > t_min` along `origin + t·dir` and the unit surface
    /// normal there (not yet oriented toward the viewer).
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = origin - center;
                let a = dir.dot(dir);
                let half_b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-half_b - sq) / a, (-half_b + sq) / a]
                    .into_iter()
                    .find(|&t| t > t_min)?;
                Some((t, (origin + dir * t - center) / *radius))
            }
            Primitive::Plane { point, normal, .. } => {
                let denom = dir.dot(normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - origin).dot(normal) / denom;
                (t > t_min).then(|| (t, normal.normalize()))
            }
            Primitive::Box {
                center, half_extents, ..
            } => {
                let lo = center - half_extents;
                let hi = center + half_extents;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
                for k in 0..3 {
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < lo[k] || origin[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[k];
                    let (mut ta, mut tb) = ((lo[k] - origin[k]) * inv, (hi[k] - origin[k]) * inv);
                    let mut axis = Vec3::zeros();
                    axis[k] = -1.0;
                    let (mut na, mut nb) = (axis, -axis);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        n0 = na;
                    }
                    if tb < t1 {
                        t1 = tb;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > t_min {
                    Some((t0, n0))
                } else if t1 > t_min {
                    Some((t1, n1))
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: Vec3,
}

impl SyntheticScene {
    /// Nearest hit over all primitives: `(t, normal, primitive index)`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir, 1e-9).map(|(t, n)| (t, n, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Ray-traced color and z-depth. Surfaces are Lambertian under a fixed
/// directional light plus ambient; two-sided, facing the viewer.
/// Misses get the background color and an invalid depth.
pub fn raytrace_synthetic(scene: &SyntheticScene, camera: &Camera) -> (RenderedImage, DepthMap) {
    let k = &camera.intrinsics;
    let (w, h) = k.dims();
    let origin = camera.pose.center();
    let light = Vec3::from(LIGHT_DIRECTION);
    let mut color = ColorImage::filled(w, h, scene.background);
    let mut alpha = vec![0.0; w * h];
    let mut depth = DepthMap::new(w, h);
    for v in 0..h {
        for u in 0..w {
            // Camera-frame direction has z = 1, so the hit parameter is the z-depth.
            let dir = camera.pose.rotation * k.pixel_direction(u, v);
            let Some((t, normal, idx)) = scene.intersect(&origin, &dir) else {
                continue;
            };
            let facing = if normal.dot(&dir) > 0.0 { -normal } else { normal };
            let lambert = facing.dot(&light).max(0.0);
            let i = v * w + u;
            color.data[i] = scene.primitives[idx].albedo() * (AMBIENT + (1.0 - AMBIENT) * lambert);
            alpha[i] = 1.0;
            depth.depth[i] = t;
            depth.valid[i] = true;
        }
    }
    let image = RenderedImage {
        color,
        alpha,
        depth: Some(
            depth
                .depth
                .iter()
                .zip(&depth.valid)
                .map(|(&z, &ok)| if ok { z } else { f64::NAN })
                .collect(),
        ),
        stats: RenderStats::default(),
    };
    (image, depth)
}
