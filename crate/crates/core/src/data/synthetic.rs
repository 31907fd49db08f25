//! Procedural stand-in for a colonoscopy dataset: textured tissue with
//! elliptical lesions whose colour encodes the class. Undefined lesions look
//! like one of the two defined classes, so they read as polyps to a model
//! that never sees their label.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{write_manifest, ManifestEntry};
use super::palette::encode_mask;
use super::{ClassMap, Sample};
use crate::error::{Error, Result};
use crate::losses::{NEOPLASTIC, NON_NEOPLASTIC, UNDEFINED};

const LESION_COLOUR: [[f64; 3]; 3] = [
    [0.0, 0.0, 0.0],
    [225.0, 190.0, 120.0], // non-neoplastic: pale
    [110.0, 30.0, 60.0],   // neoplastic: dark
];

/// Chance that a second lesion is labelled undefined.
pub const UNDEFINED_RATE: f64 = 0.3;

/// One sample of `size` x `size`; the same (index, seed) always gives the same sample.
pub fn synthetic_sample(index: usize, size: usize, seed: u64) -> Sample {
    synthetic_sample_with(index, size, seed, UNDEFINED_RATE)
}

/// As [`synthetic_sample`] with a custom undefined-lesion rate; 0 gives fully
/// labelled masks.
pub fn synthetic_sample_with(index: usize, size: usize, seed: u64, undefined_rate: f64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let base = [
        rng.gen_range(165.0..200.0),
        rng.gen_range(75.0..105.0),
        rng.gen_range(65.0..90.0),
    ];
    let (gy, gx) = (rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0));
    let s = size as f64;
    let mut pixels: Vec<[f64; 3]> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 / s - 0.5, (i % size) as f64 / s - 0.5);
            let shade = gy * y + gx * x;
            base.map(|b| b + shade + rng.gen_range(-8.0..8.0))
        })
        .collect();
    let mut mask = ClassMap::filled(size, size, 0);

    let lesions = rng.gen_range(1..=2);
    for k in 0..lesions {
        let label = if k == 1 && rng.gen_bool(undefined_rate) {
            UNDEFINED
        } else if rng.gen_bool(0.6) {
            NEOPLASTIC
        } else {
            NON_NEOPLASTIC
        };
        let (ry, rx) = (rng.gen_range(s / 6.0..s / 3.2), rng.gen_range(s / 6.0..s / 3.2));
        let cy = rng.gen_range(ry..s - ry);
        let cx = rng.gen_range(rx..s - rx);
        let colour = match label {
            UNDEFINED if rng.gen_bool(0.5) => LESION_COLOUR[NEOPLASTIC as usize],
            UNDEFINED => LESION_COLOUR[NON_NEOPLASTIC as usize],
            l => LESION_COLOUR[l as usize],
        };
        for r in 0..size {
            for c in 0..size {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                let d = dy * dy + dx * dx;
                if d <= 1.0 {
                    let i = r * size + c;
                    // brighter rim toward the centre, mild texture
                    let lift = 25.0 * (1.0 - d);
                    pixels[i] = colour.map(|v| v + lift + rng.gen_range(-6.0..6.0));
                    mask.set(r, c, label);
                }
            }
        }
    }
    let image = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = pixels[y as usize * size + x as usize];
        Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    Sample {
        id: format!("syn{index:05}"),
        image,
        mask,
    }
}

pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    synthetic_samples_with(n, size, seed, UNDEFINED_RATE)
}

pub fn synthetic_samples_with(n: usize, size: usize, seed: u64, undefined_rate: f64) -> Vec<Sample> {
    (0..n).map(|i| synthetic_sample_with(i, size, seed, undefined_rate)).collect()
}

/// Writes PNG images and masks plus `manifest.csv` under `dir`; returns the
/// manifest path. `splits` lists (split name, sample count) in order.
pub fn write_dataset(dir: &Path, splits: &[(&str, usize)], size: usize, seed: u64) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::new();
    let mut index = 0;
    for &(split, count) in splits {
        for _ in 0..count {
            let s = synthetic_sample(index, size, seed);
            let image = PathBuf::from("images").join(format!("{}.png", s.id));
            let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
            s.image.save(dir.join(&image))?;
            encode_mask(&s.mask).save(dir.join(&mask))?;
            entries.push(ManifestEntry {
                id: s.id,
                image,
                mask,
                split: split.to_string(),
            });
            index += 1;
        }
    }
    let path = dir.join("manifest.csv");
    write_manifest(&path, &entries)?;
    Ok(path)
}
