//! Float RGB images, binary masks, and their PNG/PFM encodings.
//!
//! PNG values are mapped linearly (`v / 255`); no gamma curve is applied in
//! either direction. PFM is used wherever a lossless float round trip matters.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub data: Vec<Rgb>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.data[y * self.width + x] = v;
    }

    pub fn check_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                expected: other,
                actual: self.dims(),
            });
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<[f64; 3]> {
        self.data.iter().map(|p| p.map(f64::from)).collect()
    }

    pub fn from_f64(width: usize, height: usize, data: &[[f64; 3]]) -> Self {
        Self {
            width,
            height,
            data: data.iter().map(|p| p.map(|v| v as f32)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// Mean absolute per-channel difference over pixels selected by `select`.
    pub fn mean_abs_diff(&self, other: &ImageBuffer, select: Option<&Mask>) -> Option<f64> {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            if select.is_some_and(|m| !m.data[i]) {
                continue;
            }
            for c in 0..3 {
                sum += (a[c] as f64 - b[c] as f64).abs();
            }
            n += 1;
        }
        (n > 0).then(|| sum / (3 * n) as f64)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (p, v) in img.pixels_mut().zip(&self.data) {
            *p = image::Rgb(v.map(to_u8));
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect(),
        })
    }

    /// PNG or PFM depending on the extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("pfm") => {
                let pfm = Pfm::load(path)?;
                pfm.into_rgb(path)
            }
            _ => Self::load_png(path),
        }
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        Pfm {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flatten().copied().collect(),
        }
        .save(path)
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { [1.0; 3] } else { [0.0; 3] }).collect(),
        }
    }
}

/// Portable float map, 1 or 3 channels, little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, top row first (the file itself stores bottom row first).
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = Vec::with_capacity(32 + self.data.len() * 4);
        write!(out, "{tag}\n{} {}\n-1.0\n", self.width, self.height).expect("in-memory write");
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |r: &str| Error::format("pfm", path, r);
        let mut pos = 0;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("bad magic")),
        };
        let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let scale: f32 = token()?.parse().map_err(|_| bad("bad scale"))?;
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let row = width * channels;
        let need = row * height * 4;
        if bytes.len() < pos + need {
            return Err(bad("truncated raster"));
        }
        let raw = &bytes[pos..pos + need];
        let read = |i: usize| {
            let b = [raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        };
        let mut data = vec![0.0f32; row * height];
        for y in 0..height {
            let src = (height - 1 - y) * row;
            for i in 0..row {
                data[y * row + i] = read(src + i);
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn into_rgb(self, path: &Path) -> Result<ImageBuffer> {
        if self.channels != 3 {
            return Err(Error::format("pfm", path, "expected 3 channels"));
        }
        Ok(ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(5, 3, |x, y| [x as f32 * 0.1 + 1e-7, y as f32 / 3.0, -0.25]);
        let p = dir.path().join("a.pfm");
        img.save_pfm(&p).unwrap();
        assert_eq!(ImageBuffer::load(&p).unwrap(), img);

        let gray = Pfm {
            width: 2,
            height: 2,
            channels: 1,
            data: vec![1.0, 2.0, 3.0, 4.5],
        };
        let q = dir.path().join("g.pfm");
        gray.save(&q).unwrap();
        assert_eq!(Pfm::load(&q).unwrap(), gray);
    }

    #[test]
    fn png_is_linear_v_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(4, 2, |x, y| [x as f32 * 51.0 / 255.0, y as f32, 128.0 / 255.0]);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageBuffer::load(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_pfm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pfm");
        fs::write(&p, b"PF\n4 4\n-1.0\n\0\0").unwrap();
        assert!(matches!(Pfm::load(&p), Err(Error::Format { .. })));
    }
}
