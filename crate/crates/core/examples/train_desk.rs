//! Short desk-scale training run on synthetic data: writes the train log,
//! checkpoints and a validation report under the output directory.
//!
//!     cargo run --release --example train_desk -- runs/desk 200

use std::path::PathBuf;

use blazeneo::data::synthetic::synthetic_samples;
use blazeneo::data::AugmentConfig;
use blazeneo::network::{BlazeNeo, ModelConfig};
use blazeneo::trainer::{best_checkpoint, evaluate, train, OptimConfig, TrainConfig};
use candle_core::DType;

fn main() -> blazeneo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| PathBuf::from("runs/desk"), PathBuf::from);
    let steps: usize = args.next().map_or(200, |a| a.parse().expect("steps"));

    let train_set = synthetic_samples(32, 96, 0);
    let val_set = synthetic_samples(8, 96, 1);
    let cfg = TrainConfig {
        optim: OptimConfig {
            base_lr: 0.01,
            total_steps: steps,
            ..OptimConfig::default()
        },
        augment: AugmentConfig::default(),
        scales: vec![64, 96],
        eval_size: 96,
        eval_every: 50,
        checkpoint_every: 50,
        ..TrainConfig::default()
    };
    let model = BlazeNeo::build(ModelConfig::default(), DType::F32, 0)?;
    let state = train(&model, &train_set, &val_set, &cfg, Some(&out))?;
    if let Some((step, report)) = state.best {
        println!("best validation Dice_seg {:.4} at step {step}", report.dice_seg);
    }

    let best = BlazeNeo::from_checkpoint(&best_checkpoint(&out), DType::F32)?;
    let resized: Vec<_> = val_set.iter().map(|s| blazeneo::data::resize_square(s, 96)).collect();
    print!("{}", evaluate(&best, &resized, 8)?.to_kv_text());
    Ok(())
}
