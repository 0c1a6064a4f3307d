//! RGB image buffers and their on-disk encodings (8-bit PNG, 32-bit PFM).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum PixelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("buffer length {got} does not match {width}x{height}")]
    BufferLength { width: usize, height: usize, got: usize },
}

/// Row-major linear RGB, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vec3>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, Vec3::zeros())
    }

    pub fn filled(width: usize, height: usize, color: Vec3) -> Self {
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<Vec3>) -> Result<Self, PixelError> {
        if data.len() != width * height {
            return Err(PixelError::BufferLength {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Vec3 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: Vec3) {
        self.data[v * self.width + u] = c;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn mean_color(&self) -> Vec3 {
        if self.data.is_empty() {
            return Vec3::zeros();
        }
        self.data.iter().sum::<Vec3>() / self.data.len() as f64
    }

    /// Interleaved 8-bit RGB, clamped and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|c| c.iter().map(|&x| quantize_unit(x)).collect::<Vec<_>>())
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, PixelError> {
        if bytes.len() != width * height * 3 {
            return Err(PixelError::BufferLength {
                width,
                height,
                got: bytes.len() / 3,
            });
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<(), PixelError> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self, PixelError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    /// Color PFM, little-endian, rows stored bottom to top.
    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<(), PixelError> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for v in (0..self.height).rev() {
            for u in 0..self.width {
                for c in self.get(u, v).iter() {
                    w.write_all(&(*c as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self, PixelError> {
        let (width, height, channels, values) = read_pfm_raw(path)?;
        if channels != 3 {
            return Err(PixelError::Pfm("expected a color (PF) file".into()));
        }
        let data = values
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        Self::from_vec(width, height, data)
    }
}

#[inline]
pub fn quantize_unit(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel PFM (`Pf`), e.g. a depth map. Non-finite entries are allowed.
pub fn write_pfm_gray(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<(), PixelError> {
    if values.len() != width * height {
        return Err(PixelError::BufferLength {
            width,
            height,
            got: values.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", width, height)?;
    for v in (0..height).rev() {
        for x in &values[v * width..(v + 1) * width] {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns `(width, height, channels, top-to-bottom row-major values)`.
pub fn read_pfm_raw(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f32>), PixelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String, PixelError> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim().to_string())
    };
    let channels = match next_line(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(PixelError::Pfm(format!("bad magic {other:?}"))),
    };
    let dims = next_line(&mut r)?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (Some(Ok(width)), Some(Ok(height))) = (it.next(), it.next()) else {
        return Err(PixelError::Pfm(format!("bad dimensions {dims:?}")));
    };
    let scale: f64 = next_line(&mut r)?
        .parse()
        .map_err(|_| PixelError::Pfm("bad scale".into()))?;
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let n = width * height * channels;
    if bytes.len() != n * 4 {
        return Err(PixelError::Pfm(format!(
            "expected {} payload bytes, found {}",
            n * 4,
            bytes.len()
        )));
    }
    let raw: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row = width * channels;
    let values = (0..height)
        .rev()
        .flat_map(|v| raw[v * row..(v + 1) * row].iter().copied())
        .collect();
    Ok((width, height, channels, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfm");
        let mut img = ColorImage::new(3, 2);
        img.set(2, 1, Vec3::new(0.1, 0.25, 7.0));
        img.set(0, 0, Vec3::new(-1.0, 0.5, 1e-3));
        img.write_pfm(&path).unwrap();
        let back = ColorImage::read_pfm(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for k in 0..3 {
                assert_eq!(a[k] as f32 as f64, b[k]);
            }
        }
    }

    #[test]
    fn gray_pfm_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        write_pfm_gray(&path, 2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (w, h, c, v) = read_pfm_raw(&path).unwrap();
        assert_eq!((w, h, c), (2, 2, 1));
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ColorImage::from_vec(2, 1, vec![Vec3::new(0.0, 0.5, 1.0), Vec3::new(1.5, -0.2, 0.2)]).unwrap();
        img.write_png(&path).unwrap();
        let back = ColorImage::read_png(&path).unwrap();
        assert_eq!(back.dims(), (2, 1));
        assert_eq!(back.get(0, 0), Vec3::new(0.0, 128.0 / 255.0, 1.0));
        assert_eq!(back.get(1, 0), Vec3::new(1.0, 0.0, 51.0 / 255.0));
    }
}
