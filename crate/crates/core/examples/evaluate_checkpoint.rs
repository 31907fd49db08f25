//! Evaluates a checkpoint on one split of a manifest.
//!
//!     cargo run --release --example evaluate_checkpoint -- runs/desk/checkpoint-best.safetensors data/manifest.csv test

use std::path::PathBuf;

use blazeneo::data::{load_samples, resize_square};
use blazeneo::network::BlazeNeo;
use blazeneo::trainer::evaluate;
use candle_core::DType;

fn main() -> blazeneo::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        eprintln!("usage: evaluate_checkpoint <checkpoint> <manifest> [split] [size]");
        std::process::exit(1);
    }
    let model = BlazeNeo::from_checkpoint(&PathBuf::from(&args[0]), DType::F32)?;
    let split = args.get(2).map_or("test", String::as_str);
    let size: usize = args.get(3).map_or(352, |a| a.parse().expect("size"));
    let samples: Vec<_> = load_samples(&PathBuf::from(&args[1]), split)?
        .iter()
        .map(|s| resize_square(s, size))
        .collect();
    println!(
        "{} {} on {} {split} samples at {size}x{size}",
        model.config().variant,
        model.config().scheme,
        samples.len()
    );
    print!("{}", evaluate(&model, &samples, 8)?.to_kv_text());
    Ok(())
}
