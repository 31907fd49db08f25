//! SGD training loop with linear warmup and cosine annealing.

use std::fs::File;
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, image_batch, plan_oversampling, resize_square, target_batch, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{decode, ConfusionTallies, MetricReport, DEFAULT_THRESHOLD};
use crate::network::{BlazeNeo, HeadVariant, Mode, PredictionBundle, INPUT_MULTIPLE};
use crate::ops::scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Defaults to 5% of `total_steps` when absent.
    pub warmup_steps: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-5,
            batch_size: 8,
            total_steps: 10_000,
            warmup_steps: None,
        }
    }
}

impl OptimConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.total_steps as f64 * 0.05).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("optim.base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optim.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("optim.total_steps", "must be positive"));
        }
        if self.warmup() >= self.total_steps {
            return Err(Error::config(
                "optim.warmup_steps",
                format!("{} is not below total_steps {}", self.warmup(), self.total_steps),
            ));
        }
        Ok(())
    }
}

/// Learning rate for `step` in `0..=total_steps`.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> Result<f64> {
    let (warm, total) = (cfg.warmup(), cfg.total_steps);
    if step > total {
        return Err(Error::InvalidInput(format!("step {step} beyond total_steps {total}")));
    }
    if step < warm {
        return Ok(cfg.base_lr * (step + 1) as f64 / warm as f64);
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// SGD with momentum and L2 weight decay; Nesterov form matches the common
/// deep-learning convention (`g + mu * buf`).
pub struct Sgd {
    params: Vec<(Var, Option<Tensor>)>,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, cfg: &OptimConfig) -> Self {
        Self {
            params: vars.into_iter().map(|v| (v, None)).collect(),
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, loss: &Tensor, lr: f64) -> Result<()> {
        let grads = loss.backward()?;
        for (var, buf) in &mut self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                let b = match buf.take() {
                    Some(b) => ((b * self.momentum)? + &g)?,
                    None => g.clone(),
                };
                g = if self.nesterov {
                    (g + (&b * self.momentum)?)?
                } else {
                    b.clone()
                };
                *buf = Some(b);
            }
            var.set(&(p - (g * lr)?)?)?;
        }
        Ok(())
    }
}

/// Anything that maps a batch of samples to a prediction bundle.
pub trait Segmenter {
    fn variant(&self) -> HeadVariant;
    fn predict(&self, batch: &[&Sample]) -> Result<PredictionBundle>;
}

impl Segmenter for BlazeNeo {
    fn variant(&self) -> HeadVariant {
        self.config().variant
    }

    fn predict(&self, batch: &[&Sample]) -> Result<PredictionBundle> {
        let x = image_batch(batch, self.params().dtype(), self.params().device())?;
        self.forward(&x, Mode::Infer)
    }
}

/// Inference over the whole set with tallies pooled across every pixel.
pub fn evaluate(model: &dyn Segmenter, samples: &[Sample], batch_size: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let mut tallies = ConfusionTallies::default();
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let bundle = model.predict(chunk)?;
        for (pred, s) in decode(&bundle, model.variant(), DEFAULT_THRESHOLD)?.iter().zip(chunk) {
            tallies.accumulate(pred, &s.mask)?;
        }
    }
    Ok(tallies.report())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Training resolutions; one is drawn uniformly per batch.
    pub scales: Vec<usize>,
    /// Resolution for validation passes.
    pub eval_size: usize,
    /// Steps between validation passes (0 disables them).
    pub eval_every: usize,
    /// Steps between periodic checkpoints (0 disables them).
    pub checkpoint_every: usize,
    pub oversample: bool,
    /// Stop once validation Dice_seg reaches this value.
    pub stop_at_dice: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            scales: crate::data::SCALES.to_vec(),
            eval_size: 352,
            eval_every: 500,
            checkpoint_every: 1000,
            oversample: true,
            stop_at_dice: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.scales.is_empty() {
            return Err(Error::config("train.scales", "needs at least one scale"));
        }
        for &s in self.scales.iter().chain([&self.eval_size]) {
            if s == 0 || s % INPUT_MULTIPLE != 0 {
                return Err(Error::config(
                    "train.scales",
                    format!("{s} is not a positive multiple of {INPUT_MULTIPLE}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub l_total: f64,
    pub l_main: f64,
    pub l_aux: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Optimizer updates applied so far.
    pub step: usize,
    pub epoch: usize,
    pub best: Option<(usize, MetricReport)>,
    pub rng: ChaCha8Rng,
    pub log: Vec<LogRow>,
    pub evals: Vec<(usize, MetricReport)>,
}

pub const BEST_CHECKPOINT: &str = "checkpoint-best.safetensors";
pub const LATEST_CHECKPOINT: &str = "checkpoint-latest.safetensors";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Runs the optimization loop. `val` falls back to the training set for
/// validation passes when empty. Artifacts land in `out_dir` when given.
pub fn train(
    model: &BlazeNeo,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let variant = model.config().variant;
    let (dtype, device) = (model.params().dtype(), model.params().device().clone());
    let val_set: Vec<Sample> = if val.is_empty() { train_set } else { val }
        .iter()
        .map(|s| resize_square(s, cfg.eval_size))
        .collect();

    let order: Vec<usize> = if cfg.oversample {
        let masks: Vec<_> = train_set.iter().map(|s| &s.mask).collect();
        let plan = plan_oversampling(&masks)?;
        log::info!(
            "oversampling: d={} P_non={} P_neo={}",
            plan.duplication_factor,
            plan.p_non,
            plan.p_neo
        );
        plan.expand(&masks)
    } else {
        (0..train_set.len()).collect()
    };

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((csv::Writer::from_writer(file), path))
        }
        None => None,
    };

    let vars: Vec<Var> = model.params().trainable().into_iter().map(|(_, v)| v).collect();
    let mut sgd = Sgd::new(vars, &cfg.optim);
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        best: None,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        log: Vec::new(),
        evals: Vec::new(),
    };
    let total = cfg.optim.total_steps;
    'epochs: while state.step < total {
        let mut epoch_order = order.clone();
        epoch_order.shuffle(&mut state.rng);
        for chunk in epoch_order.chunks(cfg.optim.batch_size) {
            if state.step >= total {
                break 'epochs;
            }
            let scale = cfg.scales[state.rng.gen_range(0..cfg.scales.len())];
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let seed = state.rng.gen::<u64>();
                    resize_square(&augment(&train_set[i], &cfg.augment, seed), scale)
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let x = image_batch(&refs, dtype, &device)?;
            let target = target_batch(&refs)?;
            let bundle = model.forward(&x, Mode::Train)?;
            let parts = total_loss(&bundle, &target, variant, &cfg.loss)?;
            let row = LogRow {
                step: state.step,
                lr: lr_at(state.step, &cfg.optim)?,
                l_total: scalar(&parts.total)?,
                l_main: scalar(&parts.main)?,
                l_aux: scalar(&parts.aux)?,
            };
            if ![row.l_total, row.l_main, row.l_aux].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    batch_ids: batch.iter().map(|s| s.id.clone()).collect(),
                });
            }
            sgd.step(&parts.total, row.lr)?;
            if let Some((w, path)) = writer.as_mut() {
                w.serialize(row).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            state.log.push(row);
            state.step += 1;
            log::debug!("step {} lr {:.3e} loss {:.5}", row.step, row.lr, row.l_total);

            let last = state.step == total;
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && (state.step % cfg.checkpoint_every == 0 || last) {
                    model.save(&dir.join(LATEST_CHECKPOINT))?;
                }
            }
            if cfg.eval_every > 0 && (state.step % cfg.eval_every == 0 || last) {
                let report = evaluate(model, &val_set, cfg.optim.batch_size)?;
                log::info!("step {} dice_seg {:.4}", state.step, report.dice_seg);
                state.evals.push((state.step, report));
                if state.best.map_or(true, |(_, b)| report.dice_seg > b.dice_seg) {
                    state.best = Some((state.step, report));
                    if let Some(dir) = out_dir {
                        model.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
                if cfg.stop_at_dice.is_some_and(|t| report.dice_seg >= t) {
                    break 'epochs;
                }
            }
        }
        state.epoch += 1;
    }
    Ok(state)
}

/// Path of the best checkpoint inside an output directory.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join(BEST_CHECKPOINT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassMap;
    use crate::losses::{BACKGROUND, NEOPLASTIC, NON_NEOPLASTIC};
    use crate::network::MainMap;
    use candle_core::Device;

    fn cfg(total: usize, warmup: usize) -> OptimConfig {
        OptimConfig {
            total_steps: total,
            warmup_steps: Some(warmup),
            ..OptimConfig::default()
        }
    }

    #[test]
    fn schedule_closed_form() {
        let c = cfg(1000, 50);
        assert!((lr_at(50, &c).unwrap() - 0.001).abs() < 1e-12);
        assert!(lr_at(1000, &c).unwrap().abs() < 1e-12);
        assert!((lr_at(525, &c).unwrap() - 0.0005).abs() < 1e-12);
        assert!((lr_at(0, &c).unwrap() - 0.001 / 50.0).abs() < 1e-15);
        assert!(lr_at(1001, &c).is_err());
        // both expressions give base_lr at the boundary
        assert!((lr_at(49, &c).unwrap() - 0.001).abs() < 1e-12);
    }

    #[test]
    fn default_warmup_is_five_percent() {
        let c = OptimConfig {
            total_steps: 2000,
            ..OptimConfig::default()
        };
        assert_eq!(c.warmup(), 100);
        assert!(cfg(10, 10).validate().is_err());
    }

    #[test]
    fn nesterov_matches_hand_update() {
        let var = Var::from_vec(vec![1.0f64, -2.0], 2, &Device::Cpu).unwrap();
        let c = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut sgd = Sgd::new(vec![var.clone()], &c);
        // loss = sum(p^2) / 2  =>  grad = p
        let loss = |v: &Var| (v.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let (mut p, mut buf) = ([1.0f64, -2.0], [0.0f64; 2]);
        for it in 0..3 {
            sgd.step(&loss(&var), 0.1).unwrap();
            for i in 0..2 {
                let g = p[i] + 0.1 * p[i];
                buf[i] = if it == 0 { g } else { 0.9 * buf[i] + g };
                p[i] -= 0.1 * (g + 0.9 * buf[i]);
            }
        }
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        for i in 0..2 {
            assert!((got[i] - p[i]).abs() < 1e-14, "{got:?} vs {p:?}");
        }
    }

    #[test]
    fn zero_lr_step_is_bit_identical() {
        let var = Var::from_vec(vec![0.3f32, -1.7, 2.5], 3, &Device::Cpu).unwrap();
        let before = var.as_tensor().to_vec1::<f32>().unwrap();
        let mut sgd = Sgd::new(vec![var.clone()], &OptimConfig::default());
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        sgd.step(&loss, 0.0).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f32>().unwrap(), before);
    }

    struct Echo(bool);

    impl Segmenter for Echo {
        fn variant(&self) -> HeadVariant {
            HeadVariant::St
        }
        fn predict(&self, batch: &[&Sample]) -> Result<PredictionBundle> {
            let (h, w) = (batch[0].mask.height, batch[0].mask.width);
            let mut data = Vec::new();
            for s in batch {
                for class in [NEOPLASTIC, NON_NEOPLASTIC, BACKGROUND] {
                    data.extend(s.mask.labels.iter().map(|&l| {
                        let l = if self.0 { l } else { BACKGROUND };
                        // undefined truth decodes as neoplastic
                        let l = if l == 3 { NEOPLASTIC } else { l };
                        (l == class) as u8 as f32
                    }));
                }
            }
            Ok(PredictionBundle {
                main: MainMap::Trinary(Tensor::from_vec(data, (batch.len(), 3, h, w), &Device::Cpu)?),
                aux: None,
            })
        }
    }

    fn stub_samples() -> Vec<Sample> {
        (0..3)
            .map(|i| {
                let labels = (0..16).map(|p| ((p + i) % 4) as u8).collect();
                let mask = ClassMap::new(4, 4, labels);
                Sample::new(format!("s{i}"), image::RgbImage::new(4, 4), mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn echo_stub_scores_one() {
        let r = evaluate(&Echo(true), &stub_samples(), 2).unwrap();
        assert!(r.pairs().iter().all(|(_, v)| *v == 1.0), "{r:?}");
    }

    #[test]
    fn background_stub_scores_zero_dice() {
        let r = evaluate(&Echo(false), &stub_samples(), 2).unwrap();
        assert_eq!(r.dice_seg, 0.0);
        assert!(evaluate(&Echo(true), &[], 2).is_err());
    }
}
