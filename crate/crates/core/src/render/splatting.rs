use rayon::prelude::*;

use super::{RenderOptions, RenderStats, RenderedImage};
use crate::geometry::{Camera, Vec3};
use crate::pixels::ColorImage;
use crate::splat::GaussianScene;

/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

/// Projected covariances with a larger condition number are dropped.
pub const MAX_CONDITION: f64 = 1e12;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection2D {
    pub center: (f64, f64),
    /// Upper triangle `(a, b, c)` of the 2×2 projected covariance.
    pub cov: (f64, f64, f64),
    /// Upper triangle of its inverse.
    pub conic: (f64, f64, f64),
    /// Radius of a circle containing every pixel where the Gaussian can
    /// reach [`ALPHA_MIN`].
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    pub index: usize,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    pub footprint: Projection2D,
}

/// EWA projection of every Gaussian, sorted front to back by camera-frame
/// depth with ties broken by input index.
pub fn project_gaussians(scene: &GaussianScene, camera: &Camera) -> (Vec<ProjectedSplat>, RenderStats) {
    let k = &camera.intrinsics;
    let w2c = camera.pose.rotation.transpose();
    let mut stats = RenderStats::default();
    let mut out = Vec::with_capacity(scene.len());
    for (index, g) in scene.gaussians.iter().enumerate() {
        let p = camera.pose.inverse_transform_point(&g.mean);
        if !(p.z > 0.0) || !p.iter().all(|c| c.is_finite()) || g.opacity < ALPHA_MIN {
            stats.culled += 1;
            continue;
        }
        let cov_cam = w2c * g.covariance() * camera.pose.rotation;
        // Jacobian of (x, y, z) ↦ (fx·x/z + cx, fy·y/z + cy) at the mean.
        let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
        let j0 = Vec3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2);
        let j1 = Vec3::new(0.0, k.fy * iz, -k.fy * p.y * iz2);
        let s0 = cov_cam * j0;
        let s1 = cov_cam * j1;
        let (a, b, c) = (j0.dot(&s0), j0.dot(&s1), j1.dot(&s1));
        let det = a * c - b * b;
        let mid = 0.5 * (a + c);
        let disc = (mid * mid - det).max(0.0).sqrt();
        let (lmax, lmin) = (mid + disc, mid - disc);
        if !(det > 0.0 && lmin > 0.0) || lmax / lmin > MAX_CONDITION || !det.is_finite() {
            stats.degenerate += 1;
            continue;
        }
        let conic = (c / det, -b / det, a / det);
        // α ≥ ALPHA_MIN needs mahalanobis² ≤ 2 ln(opacity / ALPHA_MIN), which
        // lies inside a circle of that many √λmax. Never tighter than 3σ.
        let sigmas = (2.0 * (g.opacity / ALPHA_MIN).ln()).max(0.0).sqrt().max(3.0);
        let radius = sigmas * lmax.sqrt() * (1.0 + 1e-9) + 1e-9;
        let (u, v) = k.project_camera(&p);
        out.push(ProjectedSplat {
            index,
            depth: p.z,
            opacity: g.opacity,
            color: g.color,
            footprint: Projection2D {
                center: (u, v),
                cov: (a, b, c),
                conic,
                radius,
            },
        });
    }
    out.sort_by(|l, r| l.depth.total_cmp(&r.depth).then(l.index.cmp(&r.index)));
    stats.projected = out.len();
    (out, stats)
}

struct PixelResult {
    color: Vec3,
    transmittance: f64,
    depth_sum: f64,
}

/// Front-to-back compositing of `splats` at continuous pixel position `(x, y)`.
#[inline]
fn composite<'a>(splats: impl Iterator<Item = &'a ProjectedSplat>, x: f64, y: f64) -> PixelResult {
    let mut color = Vec3::zeros();
    let mut t = 1.0;
    let mut depth_sum = 0.0;
    for s in splats {
        let f = &s.footprint;
        let (dx, dy) = (x - f.center.0, y - f.center.1);
        let (a, b, c) = f.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        let alpha = s.opacity * (-0.5 * q).exp();
        if alpha < ALPHA_MIN {
            continue;
        }
        let w = alpha * t;
        color += s.color * w;
        depth_sum += s.depth * w;
        t *= 1.0 - alpha;
        if t == 0.0 {
            break;
        }
    }
    PixelResult {
        color,
        transmittance: t,
        depth_sum,
    }
}

/// Final color, alpha and depth of one pixel.
type Shaded = (Vec3, f64, f64);

fn finish(px: &PixelResult, opts: &RenderOptions) -> Shaded {
    let alpha = 1.0 - px.transmittance;
    let depth = if alpha > 0.0 { px.depth_sum / alpha } else { f64::NAN };
    (px.color + opts.background * px.transmittance, alpha, depth)
}

fn assemble(
    camera: &Camera,
    opts: &RenderOptions,
    stats: RenderStats,
    pixels: impl IntoIterator<Item = (usize, Shaded)>,
) -> RenderedImage {
    let (w, h) = camera.intrinsics.dims();
    let mut color = ColorImage::filled(w, h, opts.background);
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![f64::NAN; w * h];
    for (i, (c, a, d)) in pixels {
        color.data[i] = c;
        alpha[i] = a;
        depth[i] = d;
    }
    RenderedImage {
        color,
        alpha,
        depth: opts.with_depth.then_some(depth),
        stats,
    }
}

/// Exhaustive splatting: every projected Gaussian is evaluated at every pixel.
/// Slow, and the reference the tiled path is checked against.
pub fn render_reference(scene: &GaussianScene, camera: &Camera, opts: &RenderOptions) -> RenderedImage {
    let (splats, stats) = project_gaussians(scene, camera);
    let (w, h) = camera.intrinsics.dims();
    let pixels = (0..w * h).map(|i| {
        let (u, v) = (i % w, i / w);
        let px = composite(splats.iter(), u as f64 + 0.5, v as f64 + 0.5);
        (i, finish(&px, opts))
    });
    assemble(camera, opts, stats, pixels.collect::<Vec<_>>())
}

/// Tiled splatting. Gaussians are binned to `tile_size`² tiles by a
/// conservative screen-space radius and each tile composites only its own
/// list, in the same global depth order as [`render_reference`]. Tiles render
/// in parallel; the output does not depend on the thread count.
///
/// # Panics
///
/// If `tile_size` is 0.
pub fn render_tiled(scene: &GaussianScene, camera: &Camera, tile_size: usize, opts: &RenderOptions) -> RenderedImage {
    assert!(tile_size >= 1, "tile_size must be at least 1");
    let (mut splats, mut stats) = project_gaussians(scene, camera);
    let (w, h) = camera.intrinsics.dims();
    let (tiles_x, tiles_y) = (w.div_ceil(tile_size), h.div_ceil(tile_size));

    // Off-screen Gaussians cannot reach any pixel center.
    splats.retain(|s| {
        let f = &s.footprint;
        let on_screen = f.center.0 + f.radius >= 0.0
            && f.center.0 - f.radius <= w as f64
            && f.center.1 + f.radius >= 0.0
            && f.center.1 - f.radius <= h as f64;
        if !on_screen {
            stats.culled += 1;
        }
        on_screen
    });
    stats.projected = splats.len();

    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let ts = tile_size as f64;
    for (j, s) in splats.iter().enumerate() {
        let f = &s.footprint;
        // Pixel centers sit at k + 0.5, so a tile spans [t·ts + 0.5, (t+1)·ts − 0.5].
        let tile_range = |c: f64, n: usize| {
            let lo = ((c - f.radius - 0.5) / ts).floor().max(0.0) as usize;
            let hi = ((c + f.radius - 0.5) / ts).floor();
            let hi = if hi < 0.0 { None } else { Some((hi as usize).min(n - 1)) };
            hi.filter(|&hi| lo <= hi).map(|hi| lo..=hi)
        };
        let (Some(xr), Some(yr)) = (tile_range(f.center.0, tiles_x), tile_range(f.center.1, tiles_y)) else {
            continue;
        };
        for ty in yr {
            for tx in xr.clone() {
                bins[ty * tiles_x + tx].push(j as u32);
            }
        }
    }

    let tiles: Vec<Vec<(usize, Shaded)>> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let (u0, v0) = (tx * tile_size, ty * tile_size);
            let (u1, v1) = ((u0 + tile_size).min(w), (v0 + tile_size).min(h));
            let mut out = Vec::with_capacity((u1 - u0) * (v1 - v0));
            for v in v0..v1 {
                for u in u0..u1 {
                    let px = composite(bin.iter().map(|&j| &splats[j as usize]), u as f64 + 0.5, v as f64 + 0.5);
                    out.push((v * w + u, finish(&px, opts)));
                }
            }
            out
        })
        .collect();
    assemble(camera, opts, stats, tiles.into_iter().flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::splat::Gaussian3D;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::new(
            CameraIntrinsics::new(60.0, 60.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
            CameraPose::identity(),
        )
    }

    fn gaussian(mean: Vec3, opacity: f64, scale: f64, color: Vec3) -> Gaussian3D {
        Gaussian3D {
            mean,
            opacity,
            scale: Vec3::repeat(scale),
            rotation: UnitQuaternion::identity(),
            color,
        }
    }

    pub(crate) fn random_scene(rng: &mut impl Rng, n: usize) -> GaussianScene {
        GaussianScene::from_gaussians(
            (0..n)
                .map(|_| Gaussian3D {
                    mean: Vec3::new(
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(1.0..3.0),
                    ),
                    opacity: rng.random_range(0.05..1.0),
                    scale: Vec3::new(
                        rng.random_range(0.005..0.15),
                        rng.random_range(0.005..0.15),
                        rng.random_range(0.005..0.15),
                    ),
                    rotation: UnitQuaternion::from_euler_angles(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                    ),
                    color: Vec3::new(rng.random(), rng.random(), rng.random()),
                })
                .collect(),
        )
    }

    #[test]
    fn empty_scene_is_background() {
        let opts = RenderOptions {
            background: Vec3::new(0.1, 0.2, 0.3),
            with_depth: true,
        };
        let img = render_reference(&GaussianScene::default(), &camera(4, 3), &opts);
        assert!(img.color.data.iter().all(|c| *c == opts.background));
        assert!(img.alpha.iter().all(|&a| a == 0.0));
        assert!(img.depth.as_ref().unwrap().iter().all(|z| z.is_nan()));
        let tiled = render_tiled(&GaussianScene::default(), &camera(4, 3), 2, &opts);
        assert_eq!(tiled.max_abs_diff(&img), 0.0);
        assert_eq!(tiled.stats, img.stats);
    }

    #[test]
    fn opaque_gaussian_at_pixel_center() {
        // Pixel (2, 1) center is (2.5, 1.5); cx = 2, cy = 1.5 for a 4x3 image.
        let cam = camera(4, 3);
        let z = 2.0;
        let mean = Vec3::new(0.5 * z / 60.0, 0.0, z);
        let color = Vec3::new(0.9, 0.3, 0.1);
        let scene = GaussianScene::from_gaussians(vec![gaussian(mean, 1.0, 0.01, color)]);
        let img = render_reference(&scene, &cam, &RenderOptions::default());
        assert_eq!(img.color.get(2, 1), color);
        assert_eq!(img.alpha[4 + 2], 1.0);
        assert_eq!(img.depth.as_ref().unwrap()[4 + 2], z);
    }

    #[test]
    fn two_layer_compositing() {
        let cam = camera(5, 5);
        // Pixel (2, 2) center is (2.5, 2.5) = principal point, so on-axis means hit it.
        let (a1, a2) = (0.6, 0.7);
        let (c1, c2) = (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.5, 1.0));
        let scene = GaussianScene::from_gaussians(vec![
            gaussian(Vec3::new(0.0, 0.0, 3.0), a2, 0.05, c2),
            gaussian(Vec3::new(0.0, 0.0, 1.0), a1, 0.05, c1),
        ]);
        let img = render_reference(&scene, &cam, &RenderOptions::default());
        let expect = c1 * a1 + c2 * a2 * (1.0 - a1);
        assert!((img.color.get(2, 2) - expect).amax() < 1e-15);
        let alpha = 1.0 - (1.0 - a1) * (1.0 - a2);
        assert!((img.alpha[12] - alpha).abs() < 1e-15);
    }

    #[test]
    fn single_tile_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = random_scene(&mut rng, 60);
        let cam = camera(32, 24);
        let opts = RenderOptions::default();
        let r = render_reference(&scene, &cam, &opts);
        let t = render_tiled(&scene, &cam, 32, &opts);
        assert!(r.max_abs_diff(&t) <= 1e-6);
    }

    #[test]
    fn tiled_matches_reference_random() {
        let opts = RenderOptions {
            background: Vec3::new(0.2, 0.3, 0.4),
            with_depth: false,
        };
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = random_scene(&mut rng, 100);
            let cam = camera(64, 64);
            let r = render_reference(&scene, &cam, &opts);
            for tile in [1, 7, 16] {
                let t = render_tiled(&scene, &cam, tile, &opts);
                assert!(r.max_abs_diff(&t) <= 1e-4, "seed {seed} tile {tile}");
            }
        }
    }

    #[test]
    fn outside_frustum_contributes_nothing() {
        let cam = camera(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut rng, 20);
        let mut with_far = scene.clone();
        with_far
            .gaussians
            .push(gaussian(Vec3::new(50.0, 0.0, 2.0), 1.0, 0.05, Vec3::repeat(1.0)));
        with_far
            .gaussians
            .push(gaussian(Vec3::new(0.0, 0.0, -2.0), 1.0, 0.05, Vec3::repeat(1.0)));
        let opts = RenderOptions::default();
        let a = render_tiled(&scene, &cam, 4, &opts);
        let b = render_tiled(&with_far, &cam, 4, &opts);
        assert_eq!(a.color, b.color);
        assert_eq!(b.stats.culled, a.stats.culled + 2);
        let c = render_reference(&with_far, &cam, &opts);
        assert_eq!(c.color, a.color);
    }

    #[test]
    fn degenerate_covariance_is_skipped_and_counted() {
        let cam = camera(8, 8);
        let mut g = gaussian(Vec3::new(0.0, 0.0, 2.0), 1.0, 0.05, Vec3::repeat(1.0));
        g.scale = Vec3::new(0.1, 1e-9, 0.1);
        // Thin axis in y, wide in x and along the view ray: the 2D footprint
        // has a condition number of about 1e16.
        let img = render_reference(&GaussianScene::from_gaussians(vec![g]), &cam, &RenderOptions::default());
        assert_eq!(img.stats.degenerate, 1);
        assert!(img.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = random_scene(&mut rng, 40);
        let mut shuffled = scene.clone();
        shuffled.gaussians.reverse();
        let cam = camera(24, 24);
        let a = render_tiled(&scene, &cam, 8, &RenderOptions::default());
        let b = render_tiled(&shuffled, &cam, 8, &RenderOptions::default());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn adding_gaussians_never_decreases_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let scene = random_scene(&mut rng, 30);
        let cam = camera(24, 24);
        let mut grown = scene.clone();
        grown.gaussians.extend(random_scene(&mut rng, 5).gaussians);
        let a = render_reference(&scene, &cam, &RenderOptions::default());
        let b = render_reference(&grown, &cam, &RenderOptions::default());
        for (x, y) in a.alpha.iter().zip(&b.alpha) {
            assert!(y + 1e-15 >= *x);
        }
    }

    #[test]
    fn uniform_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scene = random_scene(&mut rng, 50);
        let mut cam = camera(32, 32);
        cam.pose = CameraPose::look_at(Vec3::new(0.3, -0.2, -0.5), Vec3::new(0.0, 0.0, 2.0), -Vec3::y());
        for alpha in [0.01, 0.37, 8.0, 250.0] {
            let mut scaled_cam = cam;
            scaled_cam.pose = cam.pose.scaled(alpha);
            let a = render_tiled(&scene, &cam, 16, &RenderOptions::default());
            let b = render_tiled(&scene.scaled(alpha), &scaled_cam, 16, &RenderOptions::default());
            assert!(a.max_abs_diff(&b) <= 1e-6, "alpha {alpha}");
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let scene = random_scene(&mut rng, 80);
        let cam = camera(48, 40);
        let render_with = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| render_tiled(&scene, &cam, 8, &RenderOptions::default()))
        };
        let one = render_with(1);
        let four = render_with(4);
        assert_eq!(one.color.to_rgb8(), four.color.to_rgb8());
        assert!(one.color == four.color);
    }
}
