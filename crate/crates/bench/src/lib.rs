//! Shared fixtures for the benchmarks.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgen_core::synth::default_camera;
use splatgen_core::{Camera, Gaussian3D, GaussianScene, Vec3};

/// `n` random Gaussians inside the frustum of [`camera`].
pub fn scene(n: usize, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let z = rng.random_range(1.5..5.0);
            Gaussian3D {
                mean: Vec3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z),
                opacity: rng.random_range(0.05..1.0),
                scale: Vec3::from_fn(|_, _| rng.random_range(-5.0f64..-2.0).exp()),
                rotation: UnitQuaternion::from_quaternion(Quaternion::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                color: Vec3::from_fn(|_, _| rng.random()),
            }
        })
        .collect();
    GaussianScene::from_gaussians(gaussians)
}

/// Square camera at the origin looking down +z.
pub fn camera(resolution: usize) -> Camera {
    default_camera(resolution).expect("valid resolution")
}
