//! In-memory RGB rasters and the two acquisition-style perturbations
//! (additive noise, box blur) used to build robustness subsets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{for_each_chunk_mut, Execution};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("pixel buffer holds {actual} bytes, expected {expected} for {width}x{height}")]
    BadLength {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("image has no pixels")]
    EmptyImage,
    #[error("strength must lie in (0, 1], got {0}")]
    InvalidStrength(f64),
    #[error("could not decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("could not encode image: {0}")]
    Encode(String),
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(RasterError::BadLength {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Alternating black and white squares, one pixel each; (0, 0) is black.
    pub fn checkerboard(width: u32, height: u32) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                let v = if (x + y) % 2 == 0 { 0 } else { 255 };
                pixels.extend_from_slice(&[v, v, v]);
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Hex SHA-256 of the pixel bytes.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(&self.pixels))
    }

    pub fn decode(bytes: &[u8], label: &str) -> Result<Self, RasterError> {
        let img = image::load_from_memory(bytes).map_err(|e| RasterError::Decode {
            path: label.to_string(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (width, height) = rgb.dimensions();
        Self::new(width, height, rgb.into_raw())
    }

    pub fn open(path: &Path) -> Result<Self, RasterError> {
        let bytes = std::fs::read(path).map_err(|e| RasterError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        self.encode(image::ImageFormat::Png)
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    fn encode(&self, format: image::ImageFormat) -> Result<Vec<u8>, RasterError> {
        let buffer = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| RasterError::Encode("buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buffer
            .write_to(&mut out, format)
            .map_err(|e| RasterError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Noise,
    Blur,
}

impl PerturbKind {
    pub fn tag(&self) -> &'static str {
        match self {
            PerturbKind::Noise => "noise",
            PerturbKind::Blur => "blur",
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(PerturbKind::Noise),
            "blur" => Ok(PerturbKind::Blur),
            other => Err(format!("unknown perturbation `{other}` (expected noise or blur)")),
        }
    }
}

/// Largest per-channel offset the noise perturbation may apply.
pub fn noise_amplitude(strength: f64) -> i32 {
    (strength * 64.0).round() as i32
}

/// Half-width of the blur window; the window side is `2 * radius + 1`.
pub fn blur_radius(strength: f64) -> usize {
    (strength * 3.0).ceil() as usize
}

pub fn perturb(
    image: &RgbRaster,
    kind: PerturbKind,
    strength: f64,
    seed: u64,
) -> Result<RgbRaster, RasterError> {
    perturb_with(image, kind, strength, seed, Execution::Parallel(0))
}

/// [`perturb`] with explicit control over row parallelism. Output is
/// identical for every execution mode.
pub fn perturb_with(
    image: &RgbRaster,
    kind: PerturbKind,
    strength: f64,
    seed: u64,
    execution: Execution,
) -> Result<RgbRaster, RasterError> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(RasterError::InvalidStrength(strength));
    }
    if image.is_empty() {
        return Err(RasterError::EmptyImage);
    }
    let pixels = match kind {
        PerturbKind::Noise => add_noise(image, noise_amplitude(strength), seed),
        PerturbKind::Blur => box_blur(image, blur_radius(strength), execution),
    };
    Ok(RgbRaster {
        width: image.width,
        height: image.height,
        pixels,
    })
}

// One draw per channel byte, in row-major order, from a ChaCha8 stream seeded
// with `seed`. The stream is inherently sequential.
fn add_noise(image: &RgbRaster, amplitude: i32, seed: u64) -> Vec<u8> {
    if amplitude == 0 {
        return image.pixels.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image
        .pixels
        .iter()
        .map(|&v| {
            let offset: i32 = rng.random_range(-amplitude..=amplitude);
            (v as i32 + offset).clamp(0, 255) as u8
        })
        .collect()
}

fn box_blur(image: &RgbRaster, radius: usize, execution: Execution) -> Vec<u8> {
    let w = image.width as usize;
    let h = image.height as usize;
    let side = 2 * radius + 1;
    let area = (side * side) as u32;
    let src = &image.pixels;
    let mut out = vec![0u8; src.len()];

    for_each_chunk_mut(&mut out, w * 3, execution, |y, row| {
        for x in 0..w {
            let mut sums = [0u32; 3];
            for dy in 0..side {
                let sy = (y + dy).saturating_sub(radius).min(h - 1);
                for dx in 0..side {
                    let sx = (x + dx).saturating_sub(radius).min(w - 1);
                    let i = (sy * w + sx) * 3;
                    sums[0] += src[i] as u32;
                    sums[1] += src[i + 1] as u32;
                    sums[2] += src[i + 2] as u32;
                }
            }
            for c in 0..3 {
                row[x * 3 + c] = ((sums[c] + area / 2) / area) as u8;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_noise_is_identity() {
        let img = RgbRaster::checkerboard(5, 3);
        // round(0.007 * 64) = 0
        let out = perturb(&img, PerturbKind::Noise, 0.007, 9).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn single_pixel_blur_is_identity() {
        let img = RgbRaster::filled(1, 1, [128, 128, 128]);
        for s in [0.01, 0.5, 1.0] {
            assert_eq!(perturb(&img, PerturbKind::Blur, s, 0).unwrap(), img);
        }
    }

    #[test]
    fn strength_bounds() {
        let img = RgbRaster::checkerboard(2, 2);
        for s in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(
                perturb(&img, PerturbKind::Noise, s, 1),
                Err(RasterError::InvalidStrength(_))
            ));
        }
        let empty = RgbRaster::new(0, 0, vec![]).unwrap();
        assert!(matches!(
            perturb(&empty, PerturbKind::Blur, 0.5, 1),
            Err(RasterError::EmptyImage)
        ));
    }

    #[test]
    fn window_sizes() {
        assert_eq!(blur_radius(0.1), 1);
        assert_eq!(blur_radius(0.34), 2);
        assert_eq!(blur_radius(1.0), 3);
        assert_eq!(noise_amplitude(0.5), 32);
        assert_eq!(noise_amplitude(1.0), 64);
    }

    #[test]
    fn blur_matches_direct_average() {
        // 3x1 row [0, 90, 255] grey, radius 1, replicated edges:
        // x=0: rows all equal, columns (0,0,90) -> 270/9 = 30
        let pixels = [0u8, 90, 255]
            .iter()
            .flat_map(|&v| [v, v, v])
            .collect();
        let img = RgbRaster::new(3, 1, pixels).unwrap();
        let out = perturb(&img, PerturbKind::Blur, 0.2, 0).unwrap();
        assert_eq!(out.pixel(0, 0), [30, 30, 30]);
        // x=1: (0 + 90 + 255) * 3 / 9 = 115
        assert_eq!(out.pixel(1, 0), [115, 115, 115]);
        // x=2: (90 + 255 + 255) * 3 / 9 = 200
        assert_eq!(out.pixel(2, 0), [200, 200, 200]);
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbRaster::checkerboard(4, 3);
        let back = RgbRaster::decode(&img.to_ppm(), "mem").unwrap();
        assert_eq!(back, img);
        let back = RgbRaster::decode(&img.to_png().unwrap(), "mem").unwrap();
        assert_eq!(back, img);
    }
}
