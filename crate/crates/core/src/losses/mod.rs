//! Training objective of the geometry autoencoder and the photometric loss.
//!
//! Every geometry loss has a `*_with_grad` twin returning the analytic
//! gradient with respect to the prediction; [`gradcheck`] verifies those
//! against central differences.
//!
//! Reductions: per-pixel terms are averaged over valid ground-truth pixels
//! (pairs of valid neighbors for the gradient loss), so values do not depend
//! on resolution. The KL term is a sum over latent channels.

pub mod gradcheck;
pub mod toy_vae;

pub use gradcheck::{check_gradients, check_gradients_on, GradientReport, FD_EPSILON, GRADIENT_TOLERANCE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pointmap, Raymap, Vec3};
use crate::pixels::ColorImage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch: {what} {left:?} vs {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("latent variance {value} at index {index} is not positive")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("latent mean and variance lengths differ ({0} vs {1})")]
    LatentLength(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Decoder output or target for one view: pointmap plus 6-channel raymap.
/// Only the ground truth's validity mask is consulted.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMaps {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub rays: Vec<[f64; 6]>,
    pub valid: Vec<bool>,
}

impl GeometryMaps {
    pub fn from_maps(pointmap: &Pointmap, raymap: &Raymap) -> Result<Self> {
        if pointmap.dims() != (raymap.width, raymap.height) {
            return Err(LossError::ShapeMismatch {
                what: "pointmap/raymap",
                left: pointmap.dims(),
                right: (raymap.width, raymap.height),
            });
        }
        Ok(Self {
            width: pointmap.width,
            height: pointmap.height,
            points: pointmap.points.clone(),
            rays: raymap.channels(),
            valid: pointmap.valid.clone(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pointmap(&self) -> Pointmap {
        Pointmap {
            width: self.width,
            height: self.height,
            points: self.points.clone(),
            valid: self.valid.clone(),
        }
    }

    /// Flat layout: all points (xyz per pixel), then all rays (6 per pixel).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 9);
        out.extend(self.points.iter().flat_map(|p| [p.x, p.y, p.z]));
        out.extend(self.rays.iter().flatten());
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat), borrowing dims and mask from `self`.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let n = self.points.len();
        assert_eq!(flat.len(), n * 9, "flat geometry length");
        let points = flat[..3 * n]
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        let rays = flat[3 * n..]
            .chunks_exact(6)
            .map(|c| std::array::from_fn(|k| c[k]))
            .collect();
        Self {
            points,
            rays,
            ..self.clone()
        }
    }
}

/// Gradient with respect to a [`GeometryMaps`] prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryGrad {
    pub points: Vec<Vec3>,
    pub rays: Vec<[f64; 6]>,
}

impl GeometryGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            points: vec![Vec3::zeros(); n],
            rays: vec![[0.0; 6]; n],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.points.len() * 9);
        out.extend(self.points.iter().flat_map(|p| [p.x, p.y, p.z]));
        out.extend(self.rays.iter().flatten());
        out
    }
}

/// Posterior parameters produced by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl LatentStats {
    pub fn standard_normal(k: usize) -> Self {
        Self {
            mu: vec![0.0; k],
            var: vec![1.0; k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.var.len() {
            return Err(LossError::LatentLength(self.mu.len(), self.var.len()));
        }
        match self.var.iter().position(|&v| !(v > 0.0)) {
            Some(index) => Err(LossError::NonPositiveVariance {
                index,
                value: self.var[index],
            }),
            None => Ok(()),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.mu.iter().chain(&self.var).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let k = flat.len() / 2;
        Self {
            mu: flat[..k].to_vec(),
            var: flat[k..].to_vec(),
        }
    }
}

/// Gradient of a loss with respect to [`LatentStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrad {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// KL weight.
    pub lambda1: f64,
    /// Pointmap-gradient weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 3e-9,
            lambda2: 0.033,
        }
    }
}

/// Loss terms known to the training objective. LPIPS keeps its slot so
/// configs can name it, but needs a pretrained network and is not provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Reconstruction,
    Kl,
    PointmapGradient,
    PhotometricL2,
    Lpips,
}

impl LossKind {
    pub fn is_available(self) -> bool {
        !matches!(self, LossKind::Lpips)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub grad: f64,
    pub total: f64,
}

fn check_shapes(pred: &GeometryMaps, gt: &GeometryMaps, weights: &[f64]) -> Result<()> {
    if pred.dims() != gt.dims() || pred.points.len() != gt.points.len() || pred.rays.len() != gt.rays.len() {
        return Err(LossError::ShapeMismatch {
            what: "prediction/target",
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    if weights.len() != gt.points.len() {
        return Err(LossError::ShapeMismatch {
            what: "weights/target",
            left: (weights.len(), 1),
            right: gt.dims(),
        });
    }
    Ok(())
}

/// `mean over valid pixels of  w·‖P̂ − P‖² + ‖r̂ − r‖²`.
pub fn loss_rec(pred: &GeometryMaps, gt: &GeometryMaps, weights: &[f64]) -> Result<f64> {
    loss_rec_with_grad(pred, gt, weights).map(|(l, _)| l)
}

pub fn loss_rec_with_grad(pred: &GeometryMaps, gt: &GeometryMaps, weights: &[f64]) -> Result<(f64, GeometryGrad)> {
    check_shapes(pred, gt, weights)?;
    let n = gt.valid.iter().filter(|&&b| b).count();
    let mut grad = GeometryGrad::zeros(gt.points.len());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    for i in (0..gt.points.len()).filter(|&i| gt.valid[i]) {
        let e = pred.points[i] - gt.points[i];
        sum += weights[i] * e.norm_squared();
        grad.points[i] = e * (2.0 * weights[i] * inv_n);
        for k in 0..6 {
            let d = pred.rays[i][k] - gt.rays[i][k];
            sum += d * d;
            grad.rays[i][k] = 2.0 * d * inv_n;
        }
    }
    Ok((sum * inv_n, grad))
}

/// `−½ Σ (1 + ln var − mu² − var)`: KL divergence to a standard normal.
pub fn loss_kl(stats: &LatentStats) -> Result<f64> {
    loss_kl_with_grad(stats).map(|(l, _)| l)
}

pub fn loss_kl_with_grad(stats: &LatentStats) -> Result<(f64, LatentGrad)> {
    stats.validate()?;
    let mut loss = 0.0;
    let mut grad = LatentGrad {
        mu: Vec::with_capacity(stats.mu.len()),
        var: Vec::with_capacity(stats.var.len()),
    };
    for (&m, &v) in stats.mu.iter().zip(&stats.var) {
        loss += -0.5 * (1.0 + v.ln() - m * m - v);
        grad.mu.push(m);
        grad.var.push(0.5 * (1.0 - 1.0 / v));
    }
    Ok((loss, grad))
}

/// Squared error of horizontal and vertical forward differences,
/// `mean_h ‖∂u P̂ − ∂u P‖² + mean_v ‖∂v P̂ − ∂v P‖²`, over neighbor pairs
/// valid in `gt`. An axis without pairs contributes 0.
pub fn loss_grad(pred: &Pointmap, gt: &Pointmap) -> Result<f64> {
    loss_grad_with_grad(pred, gt).map(|(l, _)| l)
}

pub fn loss_grad_with_grad(pred: &Pointmap, gt: &Pointmap) -> Result<(f64, Vec<Vec3>)> {
    if pred.dims() != gt.dims() {
        return Err(LossError::ShapeMismatch {
            what: "pointmaps",
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    Ok(gradient_term(gt.width, gt.height, &pred.points, &gt.points, &gt.valid))
}

fn gradient_term(w: usize, h: usize, pred: &[Vec3], gt: &[Vec3], valid: &[bool]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); pred.len()];
    let mut total = 0.0;
    // (du, dv) neighbor offsets for the two axes.
    for (du, dv) in [(1usize, 0usize), (0, 1)] {
        let pairs: Vec<(usize, usize)> = (0..h.saturating_sub(dv))
            .flat_map(|v| (0..w.saturating_sub(du)).map(move |u| (u, v)))
            .map(|(u, v)| (v * w + u, (v + dv) * w + u + du))
            .filter(|&(a, b)| valid[a] && valid[b])
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let inv = 1.0 / pairs.len() as f64;
        for (a, b) in pairs {
            let e = (pred[b] - pred[a]) - (gt[b] - gt[a]);
            total += e.norm_squared() * inv;
            let g = e * (2.0 * inv);
            grad[b] += g;
            grad[a] -= g;
        }
    }
    (total, grad)
}

/// `loss_rec + λ1·loss_kl + λ2·loss_grad`.
pub fn loss_total(
    pred: &GeometryMaps,
    gt: &GeometryMaps,
    rec_weights: &[f64],
    stats: &LatentStats,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    loss_total_with_grad(pred, gt, rec_weights, stats, weights).map(|(l, _, _)| l)
}

pub fn loss_total_with_grad(
    pred: &GeometryMaps,
    gt: &GeometryMaps,
    rec_weights: &[f64],
    stats: &LatentStats,
    weights: &LossWeights,
) -> Result<(LossBreakdown, GeometryGrad, LatentGrad)> {
    let (rec, mut g) = loss_rec_with_grad(pred, gt, rec_weights)?;
    let (kl, mut gk) = loss_kl_with_grad(stats)?;
    let (grad, gp) = gradient_term(gt.width, gt.height, &pred.points, &gt.points, &gt.valid);
    for (a, b) in g.points.iter_mut().zip(&gp) {
        *a += b * weights.lambda2;
    }
    gk.mu
        .iter_mut()
        .chain(gk.var.iter_mut())
        .for_each(|x| *x *= weights.lambda1);
    let total = rec + weights.lambda1 * kl + weights.lambda2 * grad;
    Ok((LossBreakdown { rec, kl, grad, total }, g, gk))
}

/// Mean squared error over all pixels and channels.
pub fn loss_photometric_l2(rendered: &ColorImage, target: &ColorImage) -> Result<f64> {
    if rendered.dims() != target.dims() {
        return Err(LossError::ShapeMismatch {
            what: "images",
            left: rendered.dims(),
            right: target.dims(),
        });
    }
    if rendered.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / (3 * rendered.data.len()) as f64)
}
