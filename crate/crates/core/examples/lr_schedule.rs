//! Prints the warmup + cosine learning-rate curve.
//!
//!     cargo run --example lr_schedule -- 2000 0.001

use blazeneo::trainer::{lr_at, OptimConfig};

fn main() -> blazeneo::Result<()> {
    let mut args = std::env::args().skip(1);
    let total: usize = args.next().map_or(2000, |a| a.parse().expect("total steps"));
    let base_lr: f64 = args.next().map_or(0.001, |a| a.parse().expect("base lr"));
    let cfg = OptimConfig {
        total_steps: total,
        base_lr,
        ..OptimConfig::default()
    };
    cfg.validate()?;
    println!("warmup steps: {}", cfg.warmup());
    for step in (0..=total).step_by((total / 20).max(1)) {
        let lr = lr_at(step, &cfg)?;
        let bar = "#".repeat((lr / base_lr * 50.0).round() as usize);
        println!("{step:>6}  {lr:.3e}  {bar}");
    }
    Ok(())
}
