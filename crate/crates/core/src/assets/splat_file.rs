//! Chunk-quantized Gaussian asset.
//!
//! ```text
//! header   "SPCK"  u32 version  u32 gaussians  u32 chunks
//! chunk    u32 count
//!          f32 pos_min[3]  f32 pos_max[3]
//!          f32 log_scale_min[3]  f32 log_scale_max[3]
//!          count × 17-byte records
//! record   u16 position[3]   fraction of the chunk's position range
//!          u8  log_scale[3]  fraction of the chunk's log-scale range
//!          u8  color[3]      value·255
//!          u8  opacity       value·255
//!          u8  largest       index (w, x, y, z) of the omitted component
//!          u8  rest[3]       remaining components in order, mapped from
//!                            [−1/√2, 1/√2] to 0..=255
//! ```
//!
//! Chunks hold 256 Gaussians in input order, the last one the remainder.

use std::f64::consts::SQRT_2;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{expect_magic, AssetError, Reader, Result};
use crate::geometry::Vec3;
use crate::splat::{Gaussian3D, GaussianScene};

pub const SPLAT_MAGIC: [u8; 4] = *b"SPCK";
pub const SPLAT_VERSION: u32 = 1;
pub const CHUNK_SIZE: usize = 256;
pub const RECORD_BYTES: usize = 17;
const CHUNK_HEADER_BYTES: usize = 4 + 12 * 4;

const POS_LEVELS: f64 = 65535.0;
const BYTE_LEVELS: f64 = 255.0;

/// Per-chunk dequantization ranges, as stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatChunkHeader {
    pub count: u32,
    pub pos_min: [f32; 3],
    pub pos_max: [f32; 3],
    pub log_scale_min: [f32; 3],
    pub log_scale_max: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedChunk {
    pub header: SplatChunkHeader,
    pub gaussians: Vec<Gaussian3D>,
}

/// Values this close to an `f32` snap to it. Decoded log-scales pass through
/// `exp` and `ln` before re-encoding, which costs a few `f64` ulps of
/// `max(|v|, 1)`; snapping keeps the stored bounds byte-identical.
fn snaps(f: f32, v: f64) -> bool {
    (f as f64 - v).abs() <= 8.0 * f64::EPSILON * v.abs().max(1.0)
}

/// Largest `f32` not above `v`, up to snapping.
fn f32_below(v: f64) -> f32 {
    let f = v as f32;
    if f as f64 <= v || snaps(f, v) {
        f
    } else {
        f.next_down()
    }
}

fn f32_above(v: f64) -> f32 {
    let f = v as f32;
    if f as f64 >= v || snaps(f, v) {
        f
    } else {
        f.next_up()
    }
}

fn quantize(x: f64, lo: f32, hi: f32, levels: f64) -> u32 {
    let (lo, hi) = (lo as f64, hi as f64);
    if hi <= lo {
        return 0;
    }
    ((x - lo) / (hi - lo) * levels).round().clamp(0.0, levels) as u32
}

fn dequantize(q: u32, lo: f32, hi: f32, levels: f64) -> f64 {
    let (lo, hi) = (lo as f64, hi as f64);
    lo + (hi - lo) * (q as f64 / levels)
}

fn unit_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * BYTE_LEVELS).round() as u8
}

fn rest_byte(c: f64) -> u8 {
    ((c * SQRT_2 + 1.0) / 2.0 * BYTE_LEVELS).round().clamp(0.0, BYTE_LEVELS) as u8
}

fn rest_value(b: u8) -> f64 {
    (b as f64 / BYTE_LEVELS * 2.0 - 1.0) / SQRT_2
}

fn wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn restore_rotation(largest: usize, rest: [u8; 3]) -> [f64; 4] {
    let mut c = [0.0; 4];
    let mut k = 0;
    let mut sum = 0.0;
    for (i, slot) in c.iter_mut().enumerate() {
        if i != largest {
            *slot = rest_value(rest[k]);
            sum += *slot * *slot;
            k += 1;
        }
    }
    c[largest] = (1.0 - sum).max(0.0).sqrt();
    c
}

/// Smallest-three encoding. If rounding lets a stored component overtake
/// the reconstructed largest one, it is pulled in by one step so the
/// decoded quaternion re-encodes to the same bytes.
fn encode_rotation(q: &UnitQuaternion<f64>) -> [u8; 4] {
    let c = wxyz(q);
    let largest = (0..4)
        .max_by(|&a, &b| c[a].abs().total_cmp(&c[b].abs()).then(b.cmp(&a)))
        .expect("four components");
    let sign = if c[largest] < 0.0 { -1.0 } else { 1.0 };
    let mut rest = [0u8; 3];
    let mut k = 0;
    for (i, &ci) in c.iter().enumerate() {
        if i != largest {
            rest[k] = rest_byte(ci * sign);
            k += 1;
        }
    }
    loop {
        let d = restore_rotation(largest, rest);
        let Some(j) = (0..3).find(|&j| rest_value(rest[j]).abs() >= d[largest]) else {
            break;
        };
        if rest[j] > 128 {
            rest[j] -= 1;
        } else {
            rest[j] += 1;
        }
    }
    [largest as u8, rest[0], rest[1], rest[2]]
}

/// `None` if the omitted-component index is out of range.
fn decode_rotation(bytes: [u8; 4]) -> Option<UnitQuaternion<f64>> {
    let largest = bytes[0] as usize;
    if largest > 3 {
        return None;
    }
    let c = restore_rotation(largest, [bytes[1], bytes[2], bytes[3]]);
    Some(UnitQuaternion::from_quaternion(Quaternion::new(c[0], c[1], c[2], c[3])))
}

fn check_finite(g: &Gaussian3D) -> Result<()> {
    let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
    if !finite(&g.mean) {
        return Err(AssetError::NonFinite("position"));
    }
    if !g.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
        return Err(AssetError::NonFinite("scale"));
    }
    if !finite(&g.color) || !g.opacity.is_finite() {
        return Err(AssetError::NonFinite("color or opacity"));
    }
    if !wxyz(&g.rotation).iter().all(|x| x.is_finite()) {
        return Err(AssetError::NonFinite("rotation"));
    }
    Ok(())
}

fn chunk_header(chunk: &[Gaussian3D]) -> SplatChunkHeader {
    let mut h = SplatChunkHeader {
        count: chunk.len() as u32,
        pos_min: [0.0; 3],
        pos_max: [0.0; 3],
        log_scale_min: [0.0; 3],
        log_scale_max: [0.0; 3],
    };
    for a in 0..3 {
        let pos = chunk.iter().map(|g| g.mean[a]);
        let ls = chunk.iter().map(|g| g.scale[a].ln());
        h.pos_min[a] = f32_below(pos.clone().fold(f64::INFINITY, f64::min));
        h.pos_max[a] = f32_above(pos.fold(f64::NEG_INFINITY, f64::max));
        h.log_scale_min[a] = f32_below(ls.clone().fold(f64::INFINITY, f64::min));
        h.log_scale_max[a] = f32_above(ls.fold(f64::NEG_INFINITY, f64::max));
    }
    h
}

/// Serializes a non-empty scene. Colors and opacities are clamped to [0, 1].
pub fn encode_splat(scene: &GaussianScene) -> Result<Vec<u8>> {
    let n = scene.gaussians.len();
    if n == 0 {
        return Err(AssetError::EmptyScene);
    }
    let n32 = u32::try_from(n).map_err(|_| AssetError::InvalidManifest("too many gaussians".into()))?;
    for g in &scene.gaussians {
        check_finite(g)?;
    }
    let chunks = n.div_ceil(CHUNK_SIZE);
    let mut out = Vec::with_capacity(16 + chunks * CHUNK_HEADER_BYTES + n * RECORD_BYTES);
    out.extend_from_slice(&SPLAT_MAGIC);
    out.extend_from_slice(&SPLAT_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&(chunks as u32).to_le_bytes());
    for chunk in scene.gaussians.chunks(CHUNK_SIZE) {
        let h = chunk_header(chunk);
        out.extend_from_slice(&h.count.to_le_bytes());
        for v in [h.pos_min, h.pos_max, h.log_scale_min, h.log_scale_max] {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for g in chunk {
            for a in 0..3 {
                let q = quantize(g.mean[a], h.pos_min[a], h.pos_max[a], POS_LEVELS) as u16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            for a in 0..3 {
                out.push(quantize(g.scale[a].ln(), h.log_scale_min[a], h.log_scale_max[a], BYTE_LEVELS) as u8);
            }
            for a in 0..3 {
                out.push(unit_byte(g.color[a]));
            }
            out.push(unit_byte(g.opacity));
            out.extend_from_slice(&encode_rotation(&g.rotation));
        }
    }
    Ok(out)
}

fn read_triple(r: &mut Reader) -> Result<[f32; 3]> {
    Ok([r.f32()?, r.f32()?, r.f32()?])
}

/// Parses and validates a `.splat` buffer, keeping the chunk structure.
pub fn decode_splat_chunks(bytes: &[u8]) -> Result<Vec<DecodedChunk>> {
    let mut r = Reader::new(bytes);
    expect_magic(&mut r, SPLAT_MAGIC)?;
    let version = r.u32()?;
    if version != SPLAT_VERSION {
        return Err(AssetError::UnsupportedVersion {
            format: "splat",
            found: version,
        });
    }
    let n = r.u32()?;
    let declared_chunks = r.u32()?;
    let expected = (n as usize).div_ceil(CHUNK_SIZE) as u32;
    if declared_chunks != expected || n == 0 {
        return Err(AssetError::ChunkCountMismatch {
            declared: declared_chunks,
            count: n,
            expected,
        });
    }
    // Reject impossible sizes before allocating for them.
    let minimum = declared_chunks as usize * CHUNK_HEADER_BYTES + n as usize * RECORD_BYTES;
    if r.remaining() < minimum {
        return Err(AssetError::Truncated {
            offset: 16,
            needed: minimum,
            available: r.remaining(),
        });
    }
    let mut chunks = Vec::with_capacity(declared_chunks as usize);
    let mut total = 0u64;
    for chunk in 0..declared_chunks as usize {
        let count = r.u32()?;
        if count == 0 || count as usize > CHUNK_SIZE {
            return Err(AssetError::InvalidChunkCount { chunk, count });
        }
        total += count as u64;
        let header = SplatChunkHeader {
            count,
            pos_min: read_triple(&mut r)?,
            pos_max: read_triple(&mut r)?,
            log_scale_min: read_triple(&mut r)?,
            log_scale_max: read_triple(&mut r)?,
        };
        let ranges = [
            (header.pos_min, header.pos_max),
            (header.log_scale_min, header.log_scale_max),
        ];
        for (lo, hi) in ranges {
            if (0..3).any(|a| !lo[a].is_finite() || !hi[a].is_finite() || lo[a] > hi[a]) {
                return Err(AssetError::InvalidBounds { chunk });
            }
        }
        let mut gaussians = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let rec = r.take(RECORD_BYTES)?;
            let pos = |a: usize| u16::from_le_bytes([rec[2 * a], rec[2 * a + 1]]) as u32;
            let mean = Vec3::from_fn(|a, _| dequantize(pos(a), header.pos_min[a], header.pos_max[a], POS_LEVELS));
            let scale = Vec3::from_fn(|a, _| {
                dequantize(
                    rec[6 + a] as u32,
                    header.log_scale_min[a],
                    header.log_scale_max[a],
                    BYTE_LEVELS,
                )
                .exp()
            });
            let color = Vec3::from_fn(|a, _| rec[9 + a] as f64 / BYTE_LEVELS);
            let rotation =
                decode_rotation([rec[13], rec[14], rec[15], rec[16]]).ok_or(AssetError::InvalidBounds { chunk })?;
            gaussians.push(Gaussian3D {
                mean,
                opacity: rec[12] as f64 / BYTE_LEVELS,
                scale,
                rotation,
                color,
            });
        }
        chunks.push(DecodedChunk { header, gaussians });
    }
    if total != n as u64 {
        return Err(AssetError::GaussianCountMismatch {
            declared: n,
            sum: total,
        });
    }
    r.finish()?;
    Ok(chunks)
}

pub fn decode_splat(bytes: &[u8]) -> Result<GaussianScene> {
    let gaussians = decode_splat_chunks(bytes)?
        .into_iter()
        .flat_map(|c| c.gaussians)
        .collect();
    Ok(GaussianScene::from_gaussians(gaussians))
}

pub fn export_splat(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_splat(scene)?)?;
    Ok(())
}

pub fn import_splat(path: impl AsRef<Path>) -> Result<GaussianScene> {
    decode_splat(&fs::read(path)?)
}
