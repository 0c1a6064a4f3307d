//! Feed-forward 3D scene generation with pixel-aligned Gaussians.
//!
//! Each generated view is a *Splatter Image*: a pointmap calibrated onto its
//! camera rays plus one colored 3D Gaussian per pixel. This crate holds the
//! deterministic machinery around that representation:
//!
//! * [`geometry`]: cameras, pointmaps, raymaps, normalization and scaling
//! * [`splat`]: calibration, the analytic Gaussian head, merge and cull
//! * [`render`]: splatting (reference and tiled) and a ground-truth ray tracer
//! * [`losses`] and [`metrics`]: geometry VAE objective, photometric and
//!   depth metrics, finite-difference gradient checks, a toy linear VAE
//! * [`diffusion`]: v-parameterized schedules and DDIM with analytic denoisers
//! * [`synth`]: procedural scenes and camera paths
//! * [`assets`]: manifests, pointmap files, PLY, and the chunked `.splat` format
//! * [`pipeline`]: the end-to-end steps driven by the command-line tool

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assets;
pub mod diffusion;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod pixels;
pub mod render;
pub mod splat;
pub mod synth;

pub use geometry::{Camera, CameraIntrinsics, CameraPose, DepthMap, Pointmap, Raymap, SceneNormalization, Vec3};
pub use pixels::ColorImage;
pub use render::{RenderOptions, RenderedImage, SyntheticScene};
pub use splat::{Gaussian3D, GaussianScene, HeadParams, SplatterImage};
