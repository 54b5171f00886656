//! 8-bit RGB rasters and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Normalized `[0, 1]` color of a pixel.
    pub fn unit(&self, x: usize, y: usize) -> [f64; 3] {
        self.get(x, y).map(|v| v as f64 / 255.0)
    }

    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.data[p * 3 + c] as f32 / 255.0
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(pos, "truncated PPM header"));
            }
            fields.push((start, &bytes[start..pos]));
        }
        if fields[0].1 != b"P6" {
            return Err(Error::format(0, "not a binary PPM (expected P6)"));
        }
        let num = |i: usize| -> Result<usize> {
            std::str::from_utf8(fields[i].1)
                .ok()
                .and_then(|s| s.parse().ok())
                .filter(|&v: &usize| v > 0)
                .ok_or_else(|| Error::format(fields[i].0, "invalid PPM header number"))
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(Error::format(fields[3].0, format!("only maxval 255 supported, got {maxval}")));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::format(bytes.len(), "truncated PPM raster"));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ppm(&std::fs::read(path)?)
    }
}

/// Distinct, stable colors for label rasters (depth bins, classes).
pub fn label_color(label: usize, count: usize) -> [u8; 3] {
    // blue (near) to red (far) ramp
    let t = if count <= 1 { 0.0 } else { label as f64 / (count - 1) as f64 };
    let r = (255.0 * t).round() as u8;
    let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    [r, g, b]
}
