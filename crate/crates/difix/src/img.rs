//! Floating-point RGB images with 8-bit PNG I/O.
//!
//! All internal processing happens in `f64` within [0, 1], row-major HWC.
//! PNG round trips quantize with `round(v * 255) / 255`, which is the value
//! domain every on-disk image lives in.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image I/O failed for {path}: {source}")]
    Io { path: String, source: image::ImageError },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// RGB image, row-major, 3 channels, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3, "data length mismatch");
        Self { height, width, data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quantizes in place to the 8-bit value lattice used on disk.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    /// Mean squared 3x3 Laplacian response, a cheap high-frequency energy
    /// proxy used to characterize corruption texture.
    pub fn laplacian_energy(&self) -> f64 {
        if self.height < 3 || self.width < 3 {
            return 0.0;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| self.data[(yy * self.width + xx) * 3 + c];
                    let lap = 4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1)
                        - at(y, x + 1);
                    sum += lap * lap;
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let [r, g, b] = self.get(y, x);
                let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([q(r), q(g), q(b)]));
            }
        }
        buf.save(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Image, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Io { path: path.display().to_string(), source })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set(y, x, [
                    p.0[0] as f64 / 255.0,
                    p.0[1] as f64 / 255.0,
                    p.0[2] as f64 / 255.0,
                ]);
            }
        }
        Ok(out)
    }

    /// Absolute-difference heatmap against `other` (white = large error).
    pub fn diff_heatmap(&self, other: &Image) -> Image {
        assert!(self.same_shape(other));
        let mut out = Image::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let a = self.get(y, x);
                let b = other.get(y, x);
                let d = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
                let v = (d * 4.0).min(1.0);
                out.set(y, x, [v, v, v]);
            }
        }
        out
    }
}
