//! Binary PLY in the layout used by common Gaussian-splat viewers: every
//! property is a little-endian `float`, colors as degree-0 SH coefficients,
//! opacity as a logit, scales as natural logs, rotation as `w x y z`.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{AssetError, Reader, Result};
use crate::geometry::Vec3;
use crate::splat::{Gaussian3D, GaussianScene};

/// Zeroth-order real spherical harmonic.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];
// Opacities are clamped away from 0 and 1 so the logit stays finite.
const OPACITY_EPS: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn write_ply(scene: &GaussianScene) -> Result<Vec<u8>> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        scene.gaussians.len()
    )
    .into_bytes();
    for p in PROPERTIES {
        out.extend_from_slice(format!("property float {p}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in &scene.gaussians {
        let q = g.rotation.quaternion();
        let values = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            0.0,
            0.0,
            0.0,
            (g.color.x - 0.5) / SH_C0,
            (g.color.y - 0.5) / SH_C0,
            (g.color.z - 0.5) / SH_C0,
            logit(g.opacity),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AssetError::NonFinite("gaussian attribute"));
        }
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a binary little-endian PLY with a `vertex` element. Properties are
/// looked up by name, so extra float properties (higher SH bands) are skipped.
pub fn read_ply(bytes: &[u8]) -> Result<GaussianScene> {
    let bad = |m: &str| AssetError::Ply(m.to_owned());
    let end = b"end_header\n";
    let header_len = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| bad("missing end_header"))?
        + end.len();
    let header = std::str::from_utf8(&bytes[..header_len]).map_err(|_| bad("header is not utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply signature"));
    }
    let mut count = None;
    let mut names = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(bad("only binary_little_endian 1.0 is supported")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["element", ..] => return Err(bad("unexpected element")),
            ["property", "float", name] if count.is_some() => names.push(*name),
            ["property", ..] => return Err(bad("only float vertex properties are supported")),
            ["comment", ..] | ["obj_info", ..] | ["end_header"] | [] => {}
            _ => return Err(bad("unrecognized header line")),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let index = |p: &str| {
        names
            .iter()
            .position(|n| *n == p)
            .ok_or_else(|| AssetError::Ply(format!("missing property {p}")))
    };
    let idx: Vec<usize> = PROPERTIES
        .iter()
        .filter(|p| !p.starts_with('n'))
        .map(|p| index(p))
        .collect::<Result<_>>()?;
    let stride = names.len();
    let mut r = Reader::new(&bytes[header_len..]);
    if r.remaining() / 4 / stride.max(1) < count {
        return Err(AssetError::Truncated {
            offset: header_len,
            needed: count * stride * 4,
            available: r.remaining(),
        });
    }
    let mut gaussians = Vec::with_capacity(count);
    let mut row = vec![0.0f64; stride];
    for _ in 0..count {
        for v in row.iter_mut() {
            *v = r.f32()? as f64;
        }
        let f = |k: usize| row[idx[k]];
        gaussians.push(Gaussian3D {
            mean: Vec3::new(f(0), f(1), f(2)),
            color: Vec3::new(f(3), f(4), f(5)).map(|c| c * SH_C0 + 0.5),
            opacity: sigmoid(f(6)),
            scale: Vec3::new(f(7), f(8), f(9)).map(f64::exp),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(f(10), f(11), f(12), f(13))),
        });
    }
    r.finish()?;
    Ok(GaussianScene::from_gaussians(gaussians))
}

pub fn export_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_ply(scene)?)?;
    Ok(())
}

pub fn import_ply(path: impl AsRef<Path>) -> Result<GaussianScene> {
    read_ply(&fs::read(path)?)
}
