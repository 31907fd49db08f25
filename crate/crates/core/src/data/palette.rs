//! Colour-coded mask rasters.
//!
//! | class | label | RGB |
//! |---|---|---|
//! | background | 0 | (0, 0, 0) |
//! | non-neoplastic | 1 | (0, 255, 0) |
//! | neoplastic | 2 | (255, 0, 0) |
//! | undefined | 3 | (255, 255, 0) |

use image::{Rgb, RgbImage};

use super::ClassMap;
use crate::error::{Error, Result};

/// Palette colour per label, indexed by label.
pub const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [0, 255, 0], [255, 0, 0], [255, 255, 0]];

/// Largest tolerated fraction of off-palette pixels.
pub const MAX_OFF_PALETTE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedMask {
    pub map: ClassMap,
    /// Pixels that were not an exact palette colour and were snapped.
    pub off_palette: usize,
}

fn nearest_label(px: [u8; 3]) -> u8 {
    let dist = |c: &[u8; 3]| -> i32 {
        (0..3)
            .map(|i| {
                let d = px[i] as i32 - c[i] as i32;
                d * d
            })
            .sum()
    };
    let mut best = 0;
    for (i, c) in PALETTE.iter().enumerate().skip(1) {
        if dist(c) < dist(&PALETTE[best]) {
            best = i;
        }
    }
    best as u8
}

/// Maps a colour mask to labels. Off-palette pixels snap to the nearest
/// palette colour (squared RGB distance); more than 1% of them fails the file.
pub fn decode_mask(raster: &RgbImage) -> Result<DecodedMask> {
    let (w, h) = raster.dimensions();
    let mut off_palette = 0;
    let labels: Vec<u8> = raster
        .pixels()
        .map(|p| match PALETTE.iter().position(|c| *c == p.0) {
            Some(i) => i as u8,
            None => {
                off_palette += 1;
                nearest_label(p.0)
            }
        })
        .collect();
    let total = (w as usize * h as usize).max(1);
    if off_palette as f64 > MAX_OFF_PALETTE_FRACTION * total as f64 {
        return Err(Error::Annotation {
            path: "<raster>".into(),
            reason: format!(
                "{off_palette} of {total} pixels are off-palette (limit {:.0}%)",
                MAX_OFF_PALETTE_FRACTION * 100.0
            ),
        });
    }
    Ok(DecodedMask {
        map: ClassMap::new(h as usize, w as usize, labels),
        off_palette,
    })
}

/// Renders labels with the palette. Labels above 3 are a caller bug.
pub fn encode_mask(map: &ClassMap) -> RgbImage {
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(PALETTE[map.get(y as usize, x as usize) as usize])
    })
}
