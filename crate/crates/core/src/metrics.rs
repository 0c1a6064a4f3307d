//! Image and geometry metrics.
//!
//! Images are expected in `[0, 1]`. Depth metrics compare pixels that are
//! valid in both maps; the ground truth must be positive wherever valid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_point, Camera, DepthMap, GeometryError, Pointmap};
use crate::pixels::ColorImage;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Ratio threshold used for the δ accuracy by default.
pub const DELTA_EPSILON: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("ground-truth depth {value} at pixel {index} is not positive")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("no pixel is valid in both maps")]
    NoValidPixels,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(a, b))
    }
}

pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    same_dims(a.dims(), b.dims())?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_squared()).sum();
    Ok(sum / (3 * a.data.len()) as f64)
}

/// `10·log10(1 / MSE)`, or [`PSNR_CAP`] when the MSE is below 1e-10.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalized 1D Gaussian taps of length `n`.
fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering of a `w × h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for v in 0..h {
        for u in 0..ow {
            rows[v * ow + u] = taps.iter().enumerate().map(|(k, t)| t * x[v * w + u + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for v in 0..oh {
        for u in 0..ow {
            out[v * ow + u] = taps.iter().enumerate().map(|(k, t)| t * rows[(v + k) * ow + u]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of one channel. The window shrinks to the image size for
/// images smaller than 11 pixels on a side.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let n = SSIM_WINDOW.min(w).min(h);
    if n == 0 {
        return 1.0;
    }
    let taps = gaussian_taps(n, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, ow, oh) = filter_valid(a, w, h, &taps);
    let (mu_b, ..) = filter_valid(b, w, h, &taps);
    let (aa, ..) = filter_valid(&prod(a, a), w, h, &taps);
    let (bb, ..) = filter_valid(&prod(b, b), w, h, &taps);
    let (ab, ..) = filter_valid(&prod(a, b), w, h, &taps);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * (ma * mb) + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / (ow * oh) as f64
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels and
/// over window positions fully inside the image.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    same_dims(a.dims(), b.dims())?;
    let (w, h) = a.dims();
    let mut sum = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data.iter().map(|p| p[c]).collect();
        let pb: Vec<f64> = b.data.iter().map(|p| p[c]).collect();
        sum += ssim_plane(&pa, &pb, w, h);
    }
    Ok(sum / 3.0)
}

/// `(ẑ, z)` over pixels valid in both maps.
fn depth_pairs(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<(f64, f64)>> {
    same_dims((pred.width, pred.height), (gt.width, gt.height))?;
    let mut pairs = Vec::new();
    for i in 0..gt.depth.len() {
        if !gt.valid[i] {
            continue;
        }
        let z = gt.depth[i];
        if !(z > 0.0) {
            return Err(MetricError::NonPositiveDepth { index: i, value: z });
        }
        if pred.valid[i] {
            pairs.push((pred.depth[i], z));
        }
    }
    if pairs.is_empty() {
        return Err(MetricError::NoValidPixels);
    }
    Ok(pairs)
}

/// Mean of `|z − ẑ| / z`.
pub fn absrel(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let pairs = depth_pairs(pred, gt)?;
    Ok(pairs.iter().map(|(p, z)| (z - p).abs() / z).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of pixels with `max(ẑ/z, z/ẑ) < eps` (strict). Non-positive
/// predictions always fail.
pub fn delta(pred: &DepthMap, gt: &DepthMap, eps: f64) -> Result<f64> {
    let pairs = depth_pairs(pred, gt)?;
    // Multiplied out so that ẑ = eps·z sits exactly on the boundary.
    let hits = pairs
        .iter()
        .filter(|&&(p, z)| p > 0.0 && p < eps * z && z < eps * p)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean pixel distance between each valid point's projection into `camera`
/// and the center of the pixel that holds it.
pub fn duv(points: &Pointmap, camera: &Camera) -> Result<f64> {
    same_dims(points.dims(), camera.intrinsics.dims())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (u, v, p) in points.iter_valid() {
        let pr = project_point(&camera.intrinsics, &camera.pose, p)?;
        sum += (pr.u - (u as f64 + 0.5)).hypot(pr.v - (v as f64 + 0.5));
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::NoValidPixels);
    }
    Ok(sum / n as f64)
}

/// Flat record of every metric for one evaluated view. Geometry metrics are
/// absent when no pixel has valid depth in both maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: Option<f64>,
    pub delta_1_01: Option<f64>,
    pub duv: Option<f64>,
}
