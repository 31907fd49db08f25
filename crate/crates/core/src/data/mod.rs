//! Dataset ingestion and preprocessing.

pub mod augment;
pub mod manifest;
pub mod oversample;
pub mod palette;
pub mod synthetic;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};
use crate::losses::MaskedTarget;

pub use augment::{augment, AugmentConfig};
pub use manifest::{load_manifest, load_samples, ManifestEntry};
pub use oversample::{plan_oversampling, OversamplePlan};
pub use palette::{decode_mask, encode_mask, DecodedMask, PALETTE};

/// Per-pixel labels (0 background, 1 non-neoplastic, 2 neoplastic, 3 undefined), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width, "label count must equal height * width");
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn count(&self, label: u8) -> u64 {
        self.labels.iter().filter(|&&l| l == label).count() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: ClassMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RgbImage, mask: ClassMap) -> Result<Self> {
        let id = id.into();
        if (image.height() as usize, image.width() as usize) != (mask.height, mask.width) {
            return Err(Error::ShapeMismatch(format!(
                "sample {id}: image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height,
                mask.width
            )));
        }
        Ok(Self { id, image, mask })
    }
}

/// Per-channel normalization applied to images before the encoder.
pub const IMAGE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stacks images into a normalized (N, 3, H, W) tensor.
pub fn image_batch(samples: &[&Sample], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.image.height() as usize, first.image.width() as usize);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.image.height() as usize, s.image.width() as usize) != (h, w) {
            return Err(Error::ShapeMismatch(format!("batch mixes {h}x{w} with sample {}", s.id)));
        }
        for c in 0..3 {
            data.extend(
                s.image
                    .pixels()
                    .map(|p| (p.0[c] as f32 / 255.0 - IMAGE_MEAN[c]) / IMAGE_STD[c]),
            );
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn target_batch(samples: &[&Sample]) -> Result<MaskedTarget> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.mask.height, first.mask.width);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.mask.height, s.mask.width) != (h, w) {
            return Err(Error::ShapeMismatch(format!("batch mixes {h}x{w} with sample {}", s.id)));
        }
        labels.extend_from_slice(&s.mask.labels);
    }
    MaskedTarget::new(samples.len(), h, w, labels)
}

/// Training scales.
pub const SCALES: [usize; 3] = [256, 352, 512];

/// Resizes to one of the training scales.
pub fn resize_for_scale(sample: &Sample, scale: usize) -> Result<Sample> {
    if !SCALES.contains(&scale) {
        return Err(Error::InvalidInput(format!(
            "scale {scale} is not one of {SCALES:?}"
        )));
    }
    Ok(resize_square(sample, scale))
}

/// Square resize: bilinear for the image, nearest-neighbour for the mask.
pub fn resize_square(sample: &Sample, size: usize) -> Sample {
    let (h, w) = (sample.mask.height, sample.mask.width);
    if (h, w) == (size, size) {
        return sample.clone();
    }
    let image = image::imageops::resize(
        &sample.image,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let nearest = |dst: usize, src_len: usize| -> usize {
        (((dst as f64 + 0.5) * src_len as f64 / size as f64).floor() as usize).min(src_len - 1)
    };
    let mut labels = Vec::with_capacity(size * size);
    for r in 0..size {
        let sr = nearest(r, h);
        for c in 0..size {
            labels.push(sample.mask.get(sr, nearest(c, w)));
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask: ClassMap::new(size, size, labels),
    }
}
