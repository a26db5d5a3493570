//! DCT perceptual hashing on grayscale rasters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side of the resampled raster fed to the DCT.
pub const RESAMPLE_SIZE: usize = 32;
pub const DEFAULT_HASH_SIZE: u32 = 8;

// Coefficients smaller than this fraction of the raster's L1 mass are
// floating-point residue and are snapped to zero.
const SNAP_RELATIVE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PhashError {
    #[error("image is {width}x{height}; at least {min}x{min} pixels are required")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("raster has {got} samples, expected {expected}")]
    BadRaster { got: usize, expected: usize },
    #[error("raster contains non-finite samples")]
    NonFinite,
    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error("hash configuration mismatch: {0} vs {1}")]
    ConfigMismatch(String, String),
    #[error("unsupported hash size {0}; only 8 (64 bits) is supported")]
    UnsupportedSize(u32),
    #[error("invalid hash hex {0:?}")]
    BadHex(String),
    #[error("unknown hash algorithm {0:?}")]
    UnknownAlgorithm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashAlgorithm {
    PhashDct,
}

impl fmt::Display for HashAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("phash_dct")
    }
}

impl FromStr for HashAlgorithm {
    type Err = PhashError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phash_dct" => Ok(HashAlgorithm::PhashDct),
            other => Err(PhashError::UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PerceptualHash {
    pub bits: u64,
    pub algorithm: HashAlgorithm,
    pub hash_size: u32,
}

impl PerceptualHash {
    pub fn new(bits: u64) -> Self {
        Self {
            bits,
            algorithm: HashAlgorithm::PhashDct,
            hash_size: DEFAULT_HASH_SIZE,
        }
    }

    pub fn bit_width(&self) -> u32 {
        self.hash_size * self.hash_size
    }

    /// 16 lowercase hex digits, most significant first.
    pub fn to_hex(&self) -> String {
        format!("{:016x}", self.bits)
    }

    pub fn from_hex(
        hex: &str,
        algorithm: HashAlgorithm,
        hash_size: u32,
    ) -> Result<Self, PhashError> {
        if hash_size != DEFAULT_HASH_SIZE {
            return Err(PhashError::UnsupportedSize(hash_size));
        }
        if hex.len() != 16 {
            return Err(PhashError::BadHex(hex.to_string()));
        }
        let bits = u64::from_str_radix(hex, 16).map_err(|_| PhashError::BadHex(hex.to_string()))?;
        Ok(Self {
            bits,
            algorithm,
            hash_size,
        })
    }
}

pub fn hamming_distance(a: &PerceptualHash, b: &PerceptualHash) -> Result<u32, PhashError> {
    if a.algorithm != b.algorithm || a.hash_size != b.hash_size {
        return Err(PhashError::ConfigMismatch(
            format!("{}/{}", a.algorithm, a.hash_size),
            format!("{}/{}", b.algorithm, b.hash_size),
        ));
    }
    Ok((a.bits ^ b.bits).count_ones())
}

/// Row-major luminance samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayRaster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayRaster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PhashError> {
        if data.len() != width * height {
            return Err(PhashError::BadRaster {
                got: data.len(),
                expected: width * height,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PhashError::NonFinite);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn open(path: &Path) -> Result<Self, PhashError> {
        let img = image::open(path).map_err(|e| PhashError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let data = luma.into_raw().into_iter().map(f64::from).collect();
        GrayRaster::new(w as usize, h as usize, data)
    }

    /// Area-weighted downsampling to `size`x`size`.
    pub fn resample(&self, size: usize) -> GrayRaster {
        let sx = self.width as f64 / size as f64;
        let sy = self.height as f64 / size as f64;
        let wx = axis_weights(self.width, size, sx);
        let wy = axis_weights(self.height, size, sy);
        let mut out = vec![0.0; size * size];
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(y, fy) in ry {
                    let row = &self.data[y * self.width..(y + 1) * self.width];
                    for &(x, fx) in rx {
                        acc += row[x] * fx * fy;
                    }
                }
                out[oy * size + ox] = acc / (sx * sy);
            }
        }
        GrayRaster {
            width: size,
            height: size,
            data: out,
        }
    }
}

// For each output cell, the source indices it covers and the covered length.
fn axis_weights(src: usize, dst: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = start + scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let lo = start.max(i as f64);
                    let hi = end.min(i as f64 + 1.0);
                    (hi > lo).then_some((i, hi - lo))
                })
                .collect()
        })
        .collect()
}

/// Unnormalized 2-D DCT-II coefficients `(u, v)` for `u, v < keep`.
fn low_frequency_dct(raster: &GrayRaster, keep: usize) -> Vec<f64> {
    let n = raster.width;
    let cos: Vec<Vec<f64>> = (0..keep)
        .map(|k| {
            (0..n)
                .map(|i| {
                    (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
                })
                .collect()
        })
        .collect();
    let mut coeffs = Vec::with_capacity(keep * keep);
    for u in 0..keep {
        for v in 0..keep {
            let mut acc = 0.0;
            for y in 0..n {
                let row = &raster.data[y * n..(y + 1) * n];
                let cy = cos[u][y];
                let mut inner = 0.0;
                for (x, p) in row.iter().enumerate() {
                    inner += p * cos[v][x];
                }
                acc += cy * inner;
            }
            coeffs.push(4.0 * acc);
        }
    }
    coeffs
}

/// 64-bit DCT perceptual hash.
///
/// The raster is resampled to 32x32, the top-left 8x8 DCT block is kept with
/// its DC term zeroed, and bit `r * 8 + c` (MSB first) is set when that
/// coefficient is strictly greater than the block median.
pub fn compute_phash(raster: &GrayRaster) -> Result<PerceptualHash, PhashError> {
    let min = RESAMPLE_SIZE;
    if raster.width < min || raster.height < min {
        return Err(PhashError::TooSmall {
            width: raster.width,
            height: raster.height,
            min,
        });
    }
    let small = raster.resample(RESAMPLE_SIZE);
    let keep = DEFAULT_HASH_SIZE as usize;
    let mut coeffs = low_frequency_dct(&small, keep);
    coeffs[0] = 0.0;
    let mass: f64 = small.data.iter().map(|v| v.abs()).sum();
    let snap = mass * SNAP_RELATIVE;
    for c in coeffs.iter_mut() {
        if c.abs() <= snap {
            *c = 0.0;
        }
    }
    let mut sorted = coeffs.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = (sorted[mid - 1] + sorted[mid]) / 2.0;

    let mut bits = 0u64;
    for c in &coeffs {
        bits = (bits << 1) | u64::from(*c > median);
    }
    Ok(PerceptualHash::new(bits))
}

pub fn hash_image_file(path: &Path) -> Result<PerceptualHash, PhashError> {
    compute_phash(&GrayRaster::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn checkerboard(size: usize, cell: usize) -> GrayRaster {
        GrayRaster::from_fn(size, size, |x, y| {
            if (x / cell + y / cell).is_multiple_of(2) {
                255.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn hamming_examples() {
        let h = PerceptualHash::new(0xdead_beef);
        assert_eq!(hamming_distance(&h, &h).unwrap(), 0);
        assert_eq!(
            hamming_distance(&PerceptualHash::new(0), &PerceptualHash::new(u64::MAX)).unwrap(),
            64
        );
        assert_eq!(
            hamming_distance(&PerceptualHash::new(0b1000), &PerceptualHash::new(0)).unwrap(),
            1
        );
    }

    #[test]
    fn hamming_rejects_mixed_configs() {
        let a = PerceptualHash::new(0);
        let b = PerceptualHash { hash_size: 16, ..a };
        assert!(matches!(
            hamming_distance(&a, &b),
            Err(PhashError::ConfigMismatch(..))
        ));
    }

    #[test]
    fn constant_image_hashes_to_zero() {
        for level in [0.0, 1.0, 37.5, 128.0, 255.0] {
            let r = GrayRaster::from_fn(50, 41, |_, _| level);
            assert_eq!(compute_phash(&r).unwrap().bits, 0, "level {level}");
        }
    }

    #[test]
    fn identical_images_match() {
        let r = checkerboard(64, 8);
        assert_eq!(
            compute_phash(&r).unwrap(),
            compute_phash(&r.clone()).unwrap()
        );
    }

    #[test]
    fn too_small_rejected() {
        let r = GrayRaster::from_fn(31, 40, |_, _| 1.0);
        assert!(matches!(
            compute_phash(&r),
            Err(PhashError::TooSmall { .. })
        ));
        let r = GrayRaster::from_fn(0, 0, |_, _| 1.0);
        assert!(compute_phash(&r).is_err());
    }

    #[test]
    fn resample_preserves_mean() {
        let r = GrayRaster::from_fn(45, 70, |x, y| (x * 3 + y * 7) as f64 % 17.0);
        let mean = r.data().iter().sum::<f64>() / r.data().len() as f64;
        let s = r.resample(32);
        let smean = s.data().iter().sum::<f64>() / s.data().len() as f64;
        assert!((mean - smean).abs() < 1e-9);
    }

    #[test]
    fn hex_round_trip() {
        let h = PerceptualHash::new(0x0123_4567_89ab_cdef);
        assert_eq!(h.to_hex(), "0123456789abcdef");
        assert_eq!(
            PerceptualHash::from_hex("0123456789abcdef", HashAlgorithm::PhashDct, 8).unwrap(),
            h
        );
        assert!(PerceptualHash::from_hex("xyz", HashAlgorithm::PhashDct, 8).is_err());
        assert!(PerceptualHash::from_hex("0123456789abcdef", HashAlgorithm::PhashDct, 16).is_err());
    }

    proptest! {
        #[test]
        fn brightness_scaling_invariant(
            w in 32usize..60,
            h in 32usize..60,
            seed in any::<u64>(),
            exp in -4i32..6,
        ) {
            let r = GrayRaster::from_fn(w, h, |x, y| {
                let v = ((x as u64 * 2654435761) ^ (y as u64 * 40503) ^ seed) % 256;
                v as f64
            });
            let scale = 2f64.powi(exp);
            let scaled = GrayRaster::new(w, h, r.data().iter().map(|v| v * scale).collect()).unwrap();
            prop_assert_eq!(compute_phash(&r).unwrap(), compute_phash(&scaled).unwrap());
        }
    }
}
