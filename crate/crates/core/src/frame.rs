//! Image buffers and RGB-D frames.
//!
//! Color lives in `[0, 1]` as f64, row-major and channel-interleaved. Depth
//! is meters; zero or non-finite values mark invalid pixels. PNG export
//! quantizes color to 8 bits and depth to 16 bits with a declared scale
//! factor (default 5000 units per meter).

use crate::geometry::CameraIntrinsics;
use std::path::Path;
use thiserror::Error;

/// Default depth PNG quantization, in integer units per meter.
pub const DEPTH_PNG_SCALE: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("failed to decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `3 * (y * width + x)` indexes the red channel of pixel `(x, y)`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Per-pixel luminance with the usual 0.299/0.587/0.114 weights.
    pub fn luminance(&self) -> Vec<f64> {
        (0..self.width * self.height)
            .map(|i| {
                0.299 * self.data[3 * i] + 0.587 * self.data[3 * i + 1] + 0.114 * self.data[3 * i + 2]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let d = self.get(x, y);
        d.is_finite() && d > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite() && **d > 0.0).count()
    }
}

/// One RGB-D observation with its camera model.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
}

pub fn save_rgb_png(img: &RgbImage, path: &Path) -> Result<(), ImageError> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let c = img.get(x, y);
            let px = [
                (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| ImageError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage, ImageError> {
    let decoded = image::open(path)
        .map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = decoded.get_pixel(x as u32, y as u32);
            img.set(
                x,
                y,
                [
                    px[0] as f64 / 255.0,
                    px[1] as f64 / 255.0,
                    px[2] as f64 / 255.0,
                ],
            );
        }
    }
    Ok(img)
}

pub fn save_depth_png(img: &DepthImage, scale: f64, path: &Path) -> Result<(), ImageError> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        img.width as u32,
        img.height as u32,
    );
    for y in 0..img.height {
        for x in 0..img.width {
            let d = img.get(x, y);
            let q = if d.is_finite() && d > 0.0 {
                (d * scale).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            };
            buf.put_pixel(x as u32, y as u32, image::Luma([q]));
        }
    }
    buf.save(path).map_err(|e| ImageError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_depth_png(path: &Path, scale: f64) -> Result<DepthImage, ImageError> {
    let decoded = image::open(path)
        .map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .into_luma16();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut img = DepthImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let q = decoded.get_pixel(x as u32, y as u32)[0];
            img.set(x, y, q as f64 / scale);
        }
    }
    Ok(img)
}
