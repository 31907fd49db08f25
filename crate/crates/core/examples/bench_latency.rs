//! Batch-1 latency of the default model over 100 inputs, after warmup.
//!
//!     cargo run --release --example bench_latency -- 128

use blazeneo::bench::{measure, ModelTarget, DEFAULT_WARMUP, TIMED_ITERATIONS};
use blazeneo::network::{BlazeNeo, ModelConfig};
use candle_core::{DType, Device, Tensor};

fn main() -> blazeneo::Result<()> {
    let size: usize = std::env::args().nth(1).map_or(128, |a| a.parse().expect("input size"));
    let model = BlazeNeo::build(ModelConfig::default(), DType::F32, 0)?;
    let inputs = (0..TIMED_ITERATIONS)
        .map(|_| Tensor::randn(0f32, 1.0, (1, 3, size, size), &Device::Cpu))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let report = measure(&mut ModelTarget { model: &model }, &inputs, DEFAULT_WARMUP, "fp32")?;
    print!("{}", report.to_kv_text());
    Ok(())
}
