//! Image formation: Gaussian splatting (exhaustive oracle and tiled fast path)
//! and a ray tracer for procedural ground-truth scenes.

mod raytrace;
mod splatting;

pub use raytrace::{raytrace_synthetic, Primitive, SyntheticScene, AMBIENT, LIGHT_DIRECTION};
pub use splatting::{
    project_gaussians, render_reference, render_tiled, ProjectedSplat, Projection2D, ALPHA_MIN, MAX_CONDITION,
};

use crate::geometry::Vec3;
use crate::pixels::ColorImage;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub color: ColorImage,
    /// Accumulated coverage `1 − Π(1 − αᵢ)`.
    pub alpha: Vec<f64>,
    /// Alpha-normalized expected camera-frame depth; `NaN` where alpha is 0.
    pub depth: Option<Vec<f64>>,
    pub stats: RenderStats,
}

impl RenderedImage {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }

    /// Largest per-channel absolute difference in color and alpha.
    pub fn max_abs_diff(&self, other: &RenderedImage) -> f64 {
        let color = self
            .color
            .data
            .iter()
            .zip(&other.color.data)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0f64, f64::max);
        let alpha = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        color.max(alpha)
    }
}

/// Diagnostics gathered while projecting Gaussians.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Gaussians that reached compositing.
    pub projected: usize,
    /// Gaussians behind the camera, below the alpha floor, or off-screen.
    pub culled: usize,
    /// Gaussians dropped because their 2D covariance was degenerate.
    pub degenerate: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: Vec3,
    pub with_depth: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: Vec3::zeros(),
            with_depth: true,
        }
    }
}
