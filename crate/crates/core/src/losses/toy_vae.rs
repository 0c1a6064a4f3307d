//! A linear variational autoencoder over 16×16 pointmap + raymap tiles.
//!
//! Encoder `μ = E·x`, `log var = L·x + b`; decoder `x̂ = D·z + c` with
//! `z = μ + √var ⊙ ε`. It exercises the full geometry objective
//! (`loss_total`) end to end with hand-derived gradients and Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use super::{loss_total_with_grad, GeometryMaps, LatentStats, LossBreakdown, LossError, LossWeights};
use crate::geometry::{
    compute_raymap, normalize_scene, rec_weights, unproject_depth, Camera, CameraIntrinsics, CameraPose, Vec3,
};
use crate::render::raytrace_synthetic;
use crate::synth::generate_scene;

pub const TILE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum ToyVaeError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("tile {index} has shape {got:?}, expected {expected:?}")]
    TileShape {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// One training example: target geometry and its per-pixel reconstruction weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTile {
    pub target: GeometryMaps,
    pub rec_weights: Vec<f64>,
}

impl ToyTile {
    fn features(&self) -> Vec<f64> {
        encoder_input(&self.target.to_flat())
    }
}

/// Flat geometry divided by its length, so a unit step on every encoder
/// weight moves a latent by about one input magnitude.
fn encoder_input(flat: &[f64]) -> Vec<f64> {
    let inv = 1.0 / flat.len() as f64;
    flat.iter().map(|x| x * inv).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyVaeConfig {
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Standard deviation of the initial matrix entries.
    pub init_std: f64,
}

impl Default for ToyVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            learning_rate: 0.05,
            steps: 300,
            seed: 0,
            weights: LossWeights::default(),
            init_std: 1e-2,
        }
    }
}

/// Parameters stored flat: `E (k×d) | L (k×d) | b (k) | D (d×k) | c (d)`,
/// matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVae {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub params: Vec<f64>,
}

struct Layout {
    e: std::ops::Range<usize>,
    l: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
    d: std::ops::Range<usize>,
    c: std::ops::Range<usize>,
}

impl ToyVae {
    pub fn new(input_dim: usize, latent_dim: usize, init_std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut model = Self {
            input_dim,
            latent_dim,
            params: vec![0.0; 3 * input_dim * latent_dim + latent_dim + input_dim],
        };
        let lay = model.layout();
        for r in [lay.e, lay.l, lay.d] {
            for p in &mut model.params[r] {
                let n: f64 = StandardNormal.sample(rng);
                *p = n * init_std;
            }
        }
        model
    }

    fn layout(&self) -> Layout {
        let (d, k) = (self.input_dim, self.latent_dim);
        let e = 0..k * d;
        let l = e.end..e.end + k * d;
        let b = l.end..l.end + k;
        let dd = b.end..b.end + d * k;
        let c = dd.end..dd.end + d;
        Layout { e, l, b, d: dd, c }
    }

    pub fn encoder_mean(&self) -> &[f64] {
        &self.params[self.layout().e]
    }

    pub fn encoder_log_var(&self) -> (&[f64], &[f64]) {
        let lay = self.layout();
        (&self.params[lay.l], &self.params[lay.b])
    }

    pub fn decoder(&self) -> (&[f64], &[f64]) {
        let lay = self.layout();
        (&self.params[lay.d], &self.params[lay.c])
    }

    /// Posterior parameters for flat geometry ([`GeometryMaps::to_flat`]).
    pub fn encode(&self, flat: &[f64]) -> LatentStats {
        encode_with(&self.params, &self.layout(), self.latent_dim, &encoder_input(flat))
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        decode_with(&self.params, &self.layout(), self.input_dim, z)
    }

    /// Mean objective over `tiles` with fixed noise (one `ε` per tile) and its
    /// gradient with respect to `params`.
    pub fn objective(
        &self,
        params: &[f64],
        tiles: &[ToyTile],
        noise: &[Vec<f64>],
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, Vec<f64>), ToyVaeError> {
        let lay = self.layout();
        let (d, k) = (self.input_dim, self.latent_dim);
        let mut grad = vec![0.0; params.len()];
        let mut mean = LossBreakdown::default();
        let inv_n = 1.0 / tiles.len() as f64;
        for (tile, eps) in tiles.iter().zip(noise) {
            let x = tile.features();
            let stats = encode_with(params, &lay, k, &x);
            let std: Vec<f64> = stats.var.iter().map(|v| v.sqrt()).collect();
            let z: Vec<f64> = (0..k).map(|j| stats.mu[j] + std[j] * eps[j]).collect();
            let xhat = decode_with(params, &lay, d, &z);
            let pred = tile.target.with_flat(&xhat);
            let (loss, g_geom, g_lat) = loss_total_with_grad(&pred, &tile.target, &tile.rec_weights, &stats, weights)?;
            mean.rec += loss.rec * inv_n;
            mean.kl += loss.kl * inv_n;
            mean.grad += loss.grad * inv_n;
            mean.total += loss.total * inv_n;

            let gx = g_geom.to_flat();
            let mut gz = vec![0.0; k];
            let dmat = &params[lay.d.clone()];
            for i in 0..d {
                let g = gx[i] * inv_n;
                if g == 0.0 {
                    continue;
                }
                grad[lay.c.start + i] += g;
                let row = lay.d.start + i * k;
                for j in 0..k {
                    grad[row + j] += g * z[j];
                    gz[j] += dmat[i * k + j] * gx[i];
                }
            }
            for j in 0..k {
                let dmu = gz[j] + g_lat.mu[j];
                let dvar = gz[j] * eps[j] / (2.0 * std[j]) + g_lat.var[j];
                let dlv = dvar * stats.var[j];
                grad[lay.b.start + j] += dlv * inv_n;
                let (erow, lrow) = (lay.e.start + j * d, lay.l.start + j * d);
                for (i, &xi) in x.iter().enumerate() {
                    grad[erow + i] += dmu * xi * inv_n;
                    grad[lrow + i] += dlv * xi * inv_n;
                }
            }
        }
        Ok((mean, grad))
    }
}

fn encode_with(params: &[f64], lay: &Layout, k: usize, x: &[f64]) -> LatentStats {
    let d = x.len();
    let (e, l, b) = (&params[lay.e.clone()], &params[lay.l.clone()], &params[lay.b.clone()]);
    let dot = |m: &[f64], j: usize| m[j * d..(j + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    LatentStats {
        mu: (0..k).map(|j| dot(e, j)).collect(),
        var: (0..k).map(|j| (dot(l, j) + b[j]).exp()).collect(),
    }
}

fn decode_with(params: &[f64], lay: &Layout, d: usize, z: &[f64]) -> Vec<f64> {
    let k = z.len();
    let (dm, c) = (&params[lay.d.clone()], &params[lay.c.clone()]);
    (0..d)
        .map(|i| c[i] + dm[i * k..(i + 1) * k].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn draw_noise(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyVae,
    /// Training objective (fresh noise each step) before each update.
    pub loss_curve: Vec<LossBreakdown>,
    /// Objective on a fixed evaluation noise draw before training.
    pub initial: LossBreakdown,
    /// Same evaluation after training.
    pub final_loss: LossBreakdown,
}

/// Full-batch Adam on the toy VAE with reparameterized sampling.
pub fn train_toy_linear_ae(tiles: &[ToyTile], config: &ToyVaeConfig) -> Result<TrainOutcome, ToyVaeError> {
    let first = tiles.first().ok_or(ToyVaeError::EmptyDataset)?;
    if !(config.learning_rate > 0.0) {
        return Err(ToyVaeError::LearningRate(config.learning_rate));
    }
    let expected = first.target.dims();
    for (index, t) in tiles.iter().enumerate() {
        if t.target.dims() != expected || t.rec_weights.len() != t.target.points.len() {
            return Err(ToyVaeError::TileShape {
                index,
                got: t.target.dims(),
                expected,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let input_dim = first.features().len();
    let mut model = ToyVae::new(input_dim, config.latent_dim, config.init_std, &mut rng);
    let eval_noise = draw_noise(&mut rng, tiles.len(), config.latent_dim);
    let initial = model.objective(&model.params, tiles, &eval_noise, &config.weights)?.0;

    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let noise = draw_noise(&mut rng, tiles.len(), config.latent_dim);
        let (loss, grad) = model.objective(&model.params, tiles, &noise, &config.weights)?;
        if !loss.total.is_finite() {
            return Err(ToyVaeError::Diverged { step, loss: loss.total });
        }
        curve.push(loss);
        // Cosine decay to 1% of the base rate.
        let progress = step as f64 / config.steps.max(1) as f64;
        let lr = config.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (((p, g), m), v) in model.params.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + adam_eps);
        }
    }
    let final_loss = model.objective(&model.params, tiles, &eval_noise, &config.weights)?.0;
    if !final_loss.total.is_finite() {
        return Err(ToyVaeError::Diverged {
            step: config.steps,
            loss: final_loss.total,
        });
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
        initial,
        final_loss,
    })
}

/// Tiles rendered from procedural scenes. Each scene is normalized to a
/// reference camera at the origin; the tile is seen from a second, offset
/// camera, so raymaps vary between tiles.
pub fn toy_dataset(seed: u64, count: usize) -> Vec<ToyTile> {
    let k = CameraIntrinsics::from_fov_y(TILE_SIZE, TILE_SIZE, 60.0).expect("valid intrinsics");
    let mut out = Vec::with_capacity(count);
    let mut s = seed;
    while out.len() < count {
        s = s.wrapping_add(1);
        let scene = generate_scene(s, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
        let offset = Vec3::new(
            rand::Rng::random_range(&mut rng, -0.4..0.4),
            rand::Rng::random_range(&mut rng, -0.3..0.3),
            rand::Rng::random_range(&mut rng, -0.3..0.3),
        );
        let reference = Camera::new(k, CameraPose::identity());
        let view = Camera::new(k, CameraPose::look_at(offset, Vec3::new(0.0, 0.0, 2.5), -Vec3::y()));
        let pointmaps: Vec<_> = [reference, view]
            .iter()
            .map(|cam| {
                let (_, depth) = raytrace_synthetic(&scene, cam);
                unproject_depth(&cam.intrinsics, &cam.pose, &depth).expect("ray-traced depth is positive")
            })
            .collect();
        if pointmaps.iter().any(|pm| pm.valid_count() == 0) {
            continue;
        }
        let Ok((poses, maps, _)) = normalize_scene(&[reference.pose, view.pose], &pointmaps) else {
            continue;
        };
        let raymap = compute_raymap(&k, &poses[1]);
        let target = GeometryMaps::from_maps(&maps[1], &raymap).expect("matching dims");
        let rec_weights = rec_weights(&maps[1], &poses[1]);
        out.push(ToyTile { target, rec_weights });
    }
    out
}
