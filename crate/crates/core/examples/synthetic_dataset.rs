//! Writes a procedural dataset (PNG images, palette masks, manifest), reads
//! it back through the manifest loader and shows the oversampling plan.
//!
//!     cargo run --example synthetic_dataset -- /tmp/blazeneo-data

use std::path::PathBuf;

use blazeneo::data::synthetic::write_dataset;
use blazeneo::data::{load_samples, plan_oversampling};
use blazeneo::losses::{BACKGROUND, NEOPLASTIC, NON_NEOPLASTIC, UNDEFINED};

fn main() -> blazeneo::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("blazeneo-synthetic"));
    let manifest = write_dataset(&dir, &[("train", 24), ("val", 4), ("test", 4)], 128, 0)?;
    println!("manifest: {}", manifest.display());

    let train = load_samples(&manifest, "train")?;
    let mut counts = [0u64; 4];
    for s in &train {
        for label in [BACKGROUND, NON_NEOPLASTIC, NEOPLASTIC, UNDEFINED] {
            counts[label as usize] += s.mask.count(label);
        }
    }
    println!(
        "{} train samples; pixels background={} non={} neo={} undefined={}",
        train.len(),
        counts[0],
        counts[1],
        counts[2],
        counts[3]
    );

    let masks: Vec<_> = train.iter().map(|s| &s.mask).collect();
    let plan = plan_oversampling(&masks)?;
    println!(
        "oversampling: d={} P_non {} -> {} vs P_neo {}; epoch length {} -> {}",
        plan.duplication_factor,
        plan.p_non,
        plan.p_non_after(),
        plan.p_neo,
        train.len(),
        plan.expand(&masks).len()
    );
    Ok(())
}
