//! On-the-fly augmentation. Geometric transforms move image and mask
//! together (image bilinear, mask nearest-neighbour); photometric transforms
//! touch the image only.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassMap, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rotate: f64,
    pub p_scale: f64,
    pub p_blur: f64,
    pub p_jitter: f64,
    /// Rotation angle is uniform in [-max, max] degrees.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Motion-blur kernel length is an odd value in [blur_min, blur_max].
    pub blur_min: usize,
    pub blur_max: usize,
    /// Per-channel gain is uniform in [1 - jitter, 1 + jitter].
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rotate: 0.5,
            p_scale: 0.5,
            p_blur: 0.5,
            p_jitter: 0.5,
            max_rotation_deg: 30.0,
            scale_min: 0.75,
            scale_max: 1.25,
            blur_min: 3,
            blur_max: 7,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Never fires any transform.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("augment.p_hflip", self.p_hflip),
            ("augment.p_vflip", self.p_vflip),
            ("augment.p_rotate", self.p_rotate),
            ("augment.p_scale", self.p_scale),
            ("augment.p_blur", self.p_blur),
            ("augment.p_jitter", self.p_jitter),
        ];
        for (key, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.max_rotation_deg.is_finite() && self.max_rotation_deg >= 0.0) {
            return Err(Error::config("augment.max_rotation_deg", "must be finite and non-negative"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::config("augment.scale_min", "need 0 < scale_min <= scale_max"));
        }
        if self.blur_min < 1 || self.blur_min > self.blur_max {
            return Err(Error::config("augment.blur_min", "need 1 <= blur_min <= blur_max"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("augment.jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Applies a random subset of the configured transforms. The same
/// (sample, cfg, seed) always yields the same output.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    if !cfg.enabled {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    if rng.gen_bool(cfg.p_hflip) {
        image = image::imageops::flip_horizontal(&image);
        mask = flip_mask(&mask, true);
    }
    if rng.gen_bool(cfg.p_vflip) {
        image = image::imageops::flip_vertical(&image);
        mask = flip_mask(&mask, false);
    }
    let angle = if rng.gen_bool(cfg.p_rotate) {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let scale = if rng.gen_bool(cfg.p_scale) {
        rng.gen_range(cfg.scale_min..=cfg.scale_max)
    } else {
        1.0
    };
    if angle != 0.0 || scale != 1.0 {
        (image, mask) = warp(&image, &mask, angle, scale);
    }
    if rng.gen_bool(cfg.p_blur) {
        let odd: Vec<usize> = (cfg.blur_min..=cfg.blur_max).filter(|k| k % 2 == 1).collect();
        let len = if odd.is_empty() {
            cfg.blur_min
        } else {
            odd[rng.gen_range(0..odd.len())]
        };
        let horizontal = rng.gen_bool(0.5);
        image = motion_blur(&image, len, horizontal);
    }
    if rng.gen_bool(cfg.p_jitter) {
        let gains: [f64; 3] = std::array::from_fn(|_| rng.gen_range(1.0 - cfg.jitter..=1.0 + cfg.jitter));
        for p in image.pixels_mut() {
            for c in 0..3 {
                p.0[c] = (p.0[c] as f64 * gains[c]).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

fn flip_mask(m: &ClassMap, horizontal: bool) -> ClassMap {
    let mut out = m.clone();
    for r in 0..m.height {
        for c in 0..m.width {
            let v = if horizontal {
                m.get(r, m.width - 1 - c)
            } else {
                m.get(m.height - 1 - r, c)
            };
            out.set(r, c, v);
        }
    }
    out
}

/// Rotation by `angle_deg` and isotropic scaling about the image centre.
/// Uncovered pixels become black / background.
pub fn warp(image: &RgbImage, mask: &ClassMap, angle_deg: f64, scale: f64) -> (RgbImage, ClassMap) {
    let (w, h) = (mask.width, mask.height);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out_img = RgbImage::new(w as u32, h as u32);
    let mut out_mask = ClassMap::filled(h, w, 0);
    let pixel = |y: i64, x: i64| -> [f64; 3] {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            [0.0; 3]
        } else {
            let p = image.get_pixel(x as u32, y as u32).0;
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    };
    for r in 0..h {
        for c in 0..w {
            // continuous coordinates: pixel i covers [i, i + 1)
            let dy = r as f64 + 0.5 - cy;
            let dx = c as f64 + 0.5 - cx;
            let sy = (cos * dy - sin * dx) / scale + cy;
            let sx = (sin * dy + cos * dx) / scale + cx;
            let (ny, nx) = (sy.floor(), sx.floor());
            if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                out_mask.set(r, c, mask.get(ny as usize, nx as usize));
            }
            let (py, px) = (sy - 0.5, sx - 0.5);
            let (y0, x0) = (py.floor(), px.floor());
            let (ty, tx) = (py - y0, px - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let mut acc = [0.0; 3];
            for (yy, wy) in [(y0, 1.0 - ty), (y0 + 1, ty)] {
                for (xx, wx) in [(x0, 1.0 - tx), (x0 + 1, tx)] {
                    let p = pixel(yy, xx);
                    for k in 0..3 {
                        acc[k] += wy * wx * p[k];
                    }
                }
            }
            out_img.put_pixel(
                c as u32,
                r as u32,
                Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    (out_img, out_mask)
}

/// Box filter of length `len` along one axis; edges clamp.
fn motion_blur(image: &RgbImage, len: usize, horizontal: bool) -> RgbImage {
    let (w, h) = image.dimensions();
    let half = (len / 2) as i64;
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        for d in -half..=half {
            let (sx, sy) = if horizontal {
                ((x as i64 + d).clamp(0, w as i64 - 1), y as i64)
            } else {
                (x as i64, (y as i64 + d).clamp(0, h as i64 - 1))
            };
            let p = image.get_pixel(sx as u32, sy as u32).0;
            for k in 0..3 {
                acc[k] += p[k] as u32;
            }
        }
        let n = (2 * half + 1) as u32;
        Rgb(acc.map(|v| ((v + n / 2) / n) as u8))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn marked(h: usize, w: usize, r0: usize, c0: usize, size: usize) -> Sample {
        let mut mask = ClassMap::filled(h, w, 0);
        let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let inside = (r0..r0 + size).contains(&(y as usize)) && (c0..c0 + size).contains(&(x as usize));
            Rgb([if inside { 255 } else { 0 }, 0, 0])
        });
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                mask.set(r, c, 2);
            }
        }
        Sample::new("m", image, mask).unwrap()
    }

    fn only(f: impl FnOnce(&mut AugmentConfig)) -> AugmentConfig {
        let mut cfg = AugmentConfig {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rotate: 0.0,
            p_scale: 0.0,
            p_blur: 0.0,
            p_jitter: 0.0,
            ..AugmentConfig::default()
        };
        f(&mut cfg);
        cfg
    }

    #[test]
    fn horizontal_flip_moves_columns() {
        let s = marked(6, 9, 1, 2, 2);
        let out = augment(&s, &only(|c| c.p_hflip = 1.0), 3);
        for r in 0..6 {
            for c in 0..9 {
                assert_eq!(out.mask.get(r, 9 - 1 - c), s.mask.get(r, c));
            }
        }
    }

    #[test]
    fn identity_draw_leaves_sample_unchanged() {
        let s = marked(16, 16, 3, 3, 4);
        assert_eq!(augment(&s, &only(|_| {}), 42), s);
        assert_eq!(augment(&s, &AugmentConfig::disabled(), 42), s);
    }

    #[test]
    fn same_seed_same_output() {
        let s = marked(32, 32, 8, 10, 9);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            assert_eq!(augment(&s, &cfg, seed), augment(&s, &cfg, seed));
        }
    }

    #[test]
    fn photometric_leaves_mask_alone() {
        let s = marked(20, 20, 4, 4, 6);
        let cfg = only(|c| {
            c.p_blur = 1.0;
            c.p_jitter = 1.0;
        });
        let out = augment(&s, &cfg, 7);
        assert_eq!(out.mask, s.mask);
        assert_ne!(out.image, s.image);
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = only(|c| c.p_blur = 1.5);
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn geometric_transforms_keep_marker_and_mask_coincident(
            seed in any::<u64>(),
            r0 in 2usize..20,
            c0 in 2usize..20,
            size in 3usize..10,
        ) {
            let s = marked(32, 32, r0, c0, size);
            let cfg = AugmentConfig { p_blur: 0.0, p_jitter: 0.0, p_rotate: 0.9, p_scale: 0.9, ..AugmentConfig::default() };
            let out = augment(&s, &cfg, seed);
            for (p, &l) in out.image.pixels().zip(&out.mask.labels) {
                // the mask's source pixel always carries bilinear weight >= 1/4
                if l == 2 {
                    prop_assert!(p.0[0] > 0);
                }
                // full intensity needs all four bilinear neighbours inside the marker
                if p.0[0] == 255 {
                    prop_assert_eq!(l, 2);
                }
            }
        }
    }
}
