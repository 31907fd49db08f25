//! Loss terms of an untrained model on a synthetic batch, for every head
//! variant.
//!
//!     cargo run --release --example losses

use blazeneo::data::synthetic::synthetic_samples;
use blazeneo::data::{image_batch, target_batch};
use blazeneo::losses::{total_loss, LossConfig};
use blazeneo::network::{BlazeNeo, HeadVariant, ModelConfig, Mode};
use blazeneo::ops::scalar;
use candle_core::{DType, Device};

fn main() -> blazeneo::Result<()> {
    let samples = synthetic_samples(4, 64, 0);
    let refs: Vec<_> = samples.iter().collect();
    let x = image_batch(&refs, DType::F32, &Device::Cpu)?;
    let target = target_batch(&refs)?;
    let cfg = LossConfig::default();
    println!("variant  L_total   L_main    L_aux");
    for variant in HeadVariant::ALL {
        let model = BlazeNeo::build(
            ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            DType::F32,
            0,
        )?;
        let bundle = model.forward(&x, Mode::Train)?;
        let parts = total_loss(&bundle, &target, variant, &cfg)?;
        println!(
            "{:<8} {:.5}  {:.5}  {:.5}",
            variant.to_string(),
            scalar(&parts.total)?,
            scalar(&parts.main)?,
            scalar(&parts.aux)?
        );
    }
    Ok(())
}
