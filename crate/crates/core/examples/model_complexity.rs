//! Parameter and operation counts for every head variant and aggregation
//! scheme, plus the full complexity report for the default model.
//!
//!     cargo run --release --example model_complexity -- 352

use blazeneo::bench::ComplexityReport;
use blazeneo::network::{AggregationScheme, BlazeNeo, HeadVariant, ModelConfig};
use candle_core::DType;

fn main() -> blazeneo::Result<()> {
    let size: usize = std::env::args().nth(1).map_or(352, |a| a.parse().expect("input size"));
    println!("variant  scheme  inference_params  training_params  GMACs");
    for variant in HeadVariant::ALL {
        for scheme in [
            AggregationScheme::Lsc,
            AggregationScheme::Ida,
            AggregationScheme::Dia,
            AggregationScheme::Dha,
        ] {
            let model = BlazeNeo::build(
                ModelConfig {
                    variant,
                    scheme,
                    ..ModelConfig::default()
                },
                DType::F32,
                0,
            )?;
            let ops = model.cost(size, size)?;
            println!(
                "{:<8} {:<7} {:>16} {:>16} {:>6.3}",
                variant.to_string(),
                scheme.to_string(),
                model.inference_param_count(),
                model.training_param_count(),
                ops.macs as f64 / 1e9
            );
        }
    }
    let model = BlazeNeo::build(ModelConfig::default(), DType::F32, 0)?;
    print!("\n{}", ComplexityReport::of(&model, size, size)?.to_kv_text());
    Ok(())
}
