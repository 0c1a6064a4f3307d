//! Raw pointmap buffer.
//!
//! ```text
//! "PMAP"  u32 version  u32 height  u32 width
//! validity bitmap, ceil(H·W / 8) bytes, row-major, LSB first
//! H·W × f32[3] points, row-major; invalid entries are zero
//! ```

use std::fs;
use std::path::Path;

use super::{expect_magic, AssetError, Reader, Result};
use crate::geometry::{Pointmap, Vec3};

pub const POINTMAP_MAGIC: [u8; 4] = *b"PMAP";
pub const POINTMAP_VERSION: u32 = 1;

pub fn encode_pointmap(pm: &Pointmap) -> Result<Vec<u8>> {
    let n = pm.width * pm.height;
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| AssetError::InvalidDimensions {
            width: u32::MAX,
            height: u32::MAX,
        })
    };
    let (w, h) = (dim(pm.width)?, dim(pm.height)?);
    let mut out = Vec::with_capacity(16 + n.div_ceil(8) + n * 12);
    out.extend_from_slice(&POINTMAP_MAGIC);
    out.extend_from_slice(&POINTMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, _) in pm.valid.iter().enumerate().filter(|(_, &ok)| ok) {
        bits[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&bits);
    for (p, &ok) in pm.points.iter().zip(&pm.valid) {
        let p = if ok { *p } else { Vec3::zeros() };
        if !p.iter().all(|c| c.is_finite()) {
            return Err(AssetError::NonFinite("pointmap entry"));
        }
        for c in p.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pointmap(bytes: &[u8]) -> Result<Pointmap> {
    let mut r = Reader::new(bytes);
    expect_magic(&mut r, POINTMAP_MAGIC)?;
    let version = r.u32()?;
    if version != POINTMAP_VERSION {
        return Err(AssetError::UnsupportedVersion {
            format: "pointmap",
            found: version,
        });
    }
    let (height, width) = (r.u32()?, r.u32()?);
    let n = (width as usize)
        .checked_mul(height as usize)
        .filter(|&n| n > 0 && n.div_ceil(8) + n * 12 <= r.remaining())
        .ok_or(AssetError::InvalidDimensions { width, height })?;
    let bits = r.take(n.div_ceil(8))?;
    let valid: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64));
    }
    r.finish()?;
    Pointmap::from_parts(width as usize, height as usize, points, valid)
        .map_err(|_| AssetError::NonFinite("pointmap entry"))
}

pub fn write_pointmap(pm: &Pointmap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pointmap(pm)?)?;
    Ok(())
}

pub fn read_pointmap(path: impl AsRef<Path>) -> Result<Pointmap> {
    decode_pointmap(&fs::read(path)?)
}
