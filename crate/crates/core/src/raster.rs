//! Image, depth and mask rasters plus their on-disk formats.
//!
//! Depth files use the DPF1 layout: a 16-byte little-endian header
//! `{ b"DPF1", u32 width, u32 height, u32 flags }` followed by `width * height`
//! little-endian `f32` values in row-major order. Invalid pixels are written as
//! `0.0`; on load a pixel is valid iff it is finite and strictly positive.
//! `flags` is reserved and written as zero.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const DPF1_MAGIC: &[u8; 4] = b"DPF1";
pub const DPF1_VERSION: &str = "DPF1";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    BadLength {
        got: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(usize),
    #[error("non-finite pixel value")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad DPF1 file: {0}")]
    BadDepthFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Row-major `H × W × C` float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::BadChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(RasterError::BadLength {
                got: data.len(),
                width,
                height,
                channels,
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(RasterError::NonFinite);
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, color: &[f64]) -> Self {
        let channels = color.len();
        let data = (0..width * height).flat_map(|_| color.iter().copied()).collect();
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageFrame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Quantizes through 8 bits, matching a PNG save/load cycle.
    pub fn quantized(&self) -> ImageFrame {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        ImageFrame { data, ..*self }
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?;
        let (w, h, channels, raw): (usize, usize, usize, Vec<u8>) = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                (g.width() as usize, g.height() as usize, 1, g.into_raw())
            }
            _ => {
                let rgb = img.to_rgb8();
                (rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())
            }
        };
        let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(w, h, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

/// Row-major metric depth with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthFrame {
    /// Builds a frame; entries that are non-finite or `<= 0` are marked invalid.
    pub fn from_values(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                got: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        let valid: Vec<bool> = data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let data = data
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.data[i])
    }

    pub fn set(&mut self, x: usize, y: usize, d: Option<f64>) {
        let i = y * self.width + x;
        match d {
            Some(d) if d.is_finite() && d > 0.0 => {
                self.data[i] = d;
                self.valid[i] = true;
            }
            _ => {
                self.data[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn mean_valid(&self) -> Option<f64> {
        let (sum, n) = self
            .data
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .fold((0.0, 0usize), |(s, n), (d, _)| (s + d, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn write_dpf1<W: Write>(&self, mut w: W) -> Result<(), RasterError> {
        w.write_all(DPF1_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for (d, ok) in self.data.iter().zip(&self.valid) {
            let v = if *ok { *d as f32 } else { 0.0 };
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dpf1<R: Read>(mut r: R) -> Result<Self, RasterError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| RasterError::BadDepthFile("truncated header".into()))?;
        if &header[0..4] != DPF1_MAGIC {
            return Err(RasterError::BadDepthFile("bad magic".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| RasterError::BadDepthFile("dimensions overflow".into()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != n * 4 {
            return Err(RasterError::BadDepthFile(format!(
                "expected {} payload bytes, found {}",
                n * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(width, height, data)
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        let mut buf = Vec::new();
        self.write_dpf1(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        Self::read_dpf1(io::Cursor::new(fs::read(path)?))
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                got: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self {
            width: w,
            height: h,
            data: img.into_raw().into_iter().map(|b| b >= 128).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes: Vec<u8> = self.data.iter().map(|b| if *b { 255 } else { 0 }).collect();
        image::save_buffer_with_format(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}
