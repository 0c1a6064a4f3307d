//! On-disk formats: scene manifests, pointmap buffers, PLY export and the
//! chunk-quantized `.splat` asset. All binary formats are little-endian.

mod manifest;
mod ply;
mod pointmap_file;
mod splat_file;

pub use manifest::{read_manifest, write_manifest, PathRecord, SceneManifest, ViewRecord, ViewRole, MANIFEST_VERSION};
pub use ply::{export_ply, import_ply, read_ply, write_ply, SH_C0};
pub use pointmap_file::{
    decode_pointmap, encode_pointmap, read_pointmap, write_pointmap, POINTMAP_MAGIC, POINTMAP_VERSION,
};
pub use splat_file::{
    decode_splat, decode_splat_chunks, encode_splat, export_splat, import_splat, DecodedChunk, SplatChunkHeader,
    CHUNK_SIZE, RECORD_BYTES, SPLAT_MAGIC, SPLAT_VERSION,
};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {format} version {found}")]
    UnsupportedVersion { format: &'static str, found: u32 },
    #[error("truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{trailing} unexpected bytes after the declared payload")]
    TrailingBytes { trailing: usize },
    #[error("header declares {declared} chunks but {count} gaussians need {expected}")]
    ChunkCountMismatch { declared: u32, count: u32, expected: u32 },
    #[error("chunk {chunk} declares {count} gaussians (allowed 1..=256)")]
    InvalidChunkCount { chunk: usize, count: u32 },
    #[error("chunk counts sum to {sum} but the header declares {declared}")]
    GaussianCountMismatch { declared: u32, sum: u64 },
    #[error("chunk {chunk} has invalid bounds")]
    InvalidBounds { chunk: usize },
    #[error("cannot write an empty scene")]
    EmptyScene,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("pointmap header declares {width}x{height}")]
    InvalidDimensions { width: u32, height: u32 },
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

pub type Result<T, E = AssetError> = std::result::Result<T, E>;

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(AssetError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            trailing => Err(AssetError::TrailingBytes { trailing }),
        }
    }
}

pub(crate) fn expect_magic(r: &mut Reader, expected: [u8; 4]) -> Result<()> {
    let found = r.array::<4>()?;
    if found != expected {
        return Err(AssetError::BadMagic { expected, found });
    }
    Ok(())
}
