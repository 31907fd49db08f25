//! Applies the joint image/mask augmentation a few times and writes the
//! results as PNG pairs.
//!
//!     cargo run --example augmentation -- /tmp/blazeneo-aug

use std::path::PathBuf;

use blazeneo::data::synthetic::synthetic_sample;
use blazeneo::data::{augment, encode_mask, AugmentConfig};

fn main() -> blazeneo::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("blazeneo-augment"));
    std::fs::create_dir_all(&dir).expect("create output directory");

    let sample = synthetic_sample(0, 192, 3);
    let cfg = AugmentConfig::default();
    cfg.validate()?;
    for seed in 0..6u64 {
        let out = augment(&sample, &cfg, seed);
        let image = dir.join(format!("aug{seed}.png"));
        let mask = dir.join(format!("aug{seed}_mask.png"));
        out.image.save(&image)?;
        encode_mask(&out.mask).save(&mask)?;
        println!("seed {seed}: {} polyp pixels -> {}", 192 * 192 - out.mask.count(0), image.display());
    }
    Ok(())
}
