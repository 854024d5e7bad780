//! Image enhancement, resizing and augmentation-based class balancing.

mod augment;
mod clahe;
mod filters;

pub use augment::{augment_balance, AugmentSpec, Crop, Rotation};
pub use clahe::{clahe, ClaheConfig};
pub use filters::{resize, sharpen};

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(PreprocessError::Param(format!("image extents must be positive, got {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(PreprocessError::Param(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(PreprocessError::Param(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn put(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Converts to an `h × w × c` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("extents validated at construction")
    }

    /// Reads PNG or binary PPM (P6); grayscale stays single-channel.
    pub fn load(path: &Path) -> Result<Self> {
        let decode = |source| PreprocessError::Decode { path: path.display().to_string(), source };
        let img = image::open(path).map_err(decode)?;
        let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16);
        if gray {
            let g = img.to_luma8();
            Self::new(g.height() as usize, g.width() as usize, 1, g.into_raw())
        } else {
            let c = img.to_rgb8();
            Self::new(c.height() as usize, c.width() as usize, 3, c.into_raw())
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        image::save_buffer_with_format(path, &self.pixels, self.width as u32, self.height as u32, color, image::ImageFormat::Png)
            .map_err(|source| PreprocessError::Decode { path: path.display().to_string(), source })
    }
}

pub(crate) fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
