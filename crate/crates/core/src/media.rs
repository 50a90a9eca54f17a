//! Frame and mask image files (binary PPM / PGM).

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("binary and instance masks differ in size: {0:?} vs {1:?}")]
    MaskSizeMismatch((u32, u32), (u32, u32)),
    #[error("binary mask contains value {0}; only 0 and 255 are allowed")]
    NonBinaryMask(u8),
}

/// Lane segmentation masks for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    /// Lane pixels are 255, background 0.
    pub binary: GrayImage,
    /// 0 is background, 1..=K identify lane instances.
    pub instance: GrayImage,
}

impl MaskPair {
    pub fn new(binary: GrayImage, instance: GrayImage) -> Result<Self, MediaError> {
        if binary.dimensions() != instance.dimensions() {
            return Err(MediaError::MaskSizeMismatch(binary.dimensions(), instance.dimensions()));
        }
        if let Some(&v) = binary.as_raw().iter().find(|&&v| v != 0 && v != 255) {
            return Err(MediaError::NonBinaryMask(v));
        }
        Ok(Self { binary, instance })
    }

    pub fn load(binary: &Path, instance: &Path) -> Result<Self, MediaError> {
        Self::new(load_gray(binary)?, load_gray(instance)?)
    }

    pub fn max_instance_id(&self) -> u8 {
        self.instance.as_raw().iter().copied().max().unwrap_or(0)
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, MediaError> {
    image::open(path)
        .map(|img| img.into_rgb8())
        .map_err(|source| MediaError::Read {
            path: path.display().to_string(),
            source,
        })
}

pub fn load_gray(path: &Path) -> Result<GrayImage, MediaError> {
    image::open(path)
        .map(|img| img.into_luma8())
        .map_err(|source| MediaError::Read {
            path: path.display().to_string(),
            source,
        })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<(), MediaError> {
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|source| MediaError::Write {
            path: path.display().to_string(),
            source,
        })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<(), MediaError> {
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|source| MediaError::Write {
            path: path.display().to_string(),
            source,
        })
}
