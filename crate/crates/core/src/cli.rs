//! Command-line front end: `train`, `eval`, `bench`, `inspect-topology` and
//! `print-config`.
//!
//! Exit codes are 0 on success, 1 for usage or configuration errors and 2 for
//! runtime failures. `BLAZENEO_OUTPUT_DIR` and `BLAZENEO_SEED` override the
//! output directory and seed of any subcommand.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::{measure, ComplexityReport, ModelTarget, DEFAULT_WARMUP, TIMED_ITERATIONS};
use crate::data::{load_samples, resize_square, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricReport;
use crate::network::{AggregationScheme, BlazeNeo, HeadVariant, ModelConfig, DEFAULT_RFB_CHANNELS, INPUT_MULTIPLE};
use crate::topology::{plan_hardnet68, render_plan};
use crate::trainer::{evaluate, train, OptimConfig, TrainConfig, BEST_CHECKPOINT};

pub const ENV_OUTPUT_DIR: &str = "BLAZENEO_OUTPUT_DIR";
pub const ENV_SEED: &str = "BLAZENEO_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV index with columns id,image,mask,split.
    pub manifest: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: HeadVariant,
    pub scheme: AggregationScheme,
    pub rfb_channels: usize,
    /// Optional pretrained encoder weights (safetensors, names under `encoder.`).
    pub encoder_weights: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            variant: m.variant,
            scheme: m.scheme,
            rfb_channels: DEFAULT_RFB_CHANNELS,
            encoder_weights: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            scheme: self.scheme,
            rfb_channels: self.rfb_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub scales: Vec<usize>,
    pub eval_size: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub oversample: bool,
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            scales: t.scales,
            eval_size: t.eval_size,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            oversample: t.oversample,
            stop_at_dice: t.stop_at_dice,
        }
    }
}

/// Everything `train` needs, as one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // unknown_field errors name the key themselves; point at the span otherwise
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            Error::config(key, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies environment overrides through `env` (a lookup function so
    /// callers and tests need not touch the process environment).
    pub fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = env(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(seed) = env(ENV_SEED) {
            self.seed = parse_seed(&seed)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optim: self.optim.clone(),
            loss: self.loss,
            augment: self.augment.clone(),
            scales: self.train.scales.clone(),
            eval_size: self.train.eval_size,
            eval_every: self.train.eval_every,
            checkpoint_every: self.train.checkpoint_every,
            oversample: self.train.oversample,
            stop_at_dice: self.train.stop_at_dice,
            seed: self.seed,
        }
    }

    /// Full validation, including that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        match &self.data.manifest {
            None => return Err(Error::config("data.manifest", "required")),
            Some(p) if !p.is_file() => {
                return Err(Error::config(
                    "data.manifest",
                    format!("{} does not exist", p.display()),
                ))
            }
            _ => {}
        }
        if let Some(p) = &self.model.encoder_weights {
            if !p.is_file() {
                return Err(Error::config(
                    "model.encoder_weights",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        if self.model.rfb_channels == 0 {
            return Err(Error::config("model.rfb_channels", "must be positive"));
        }
        self.train_config().validate()
    }
}

fn parse_seed(s: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(ENV_SEED, format!("`{s}` is not an unsigned integer")))
}

#[derive(Debug, Parser)]
#[command(name = "blazeneo", version, about = "Polyp segmentation and neoplasm detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Square evaluation resolution.
        #[arg(long, default_value_t = 352)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value = "runs/eval")]
        output_dir: PathBuf,
    },
    /// Latency and complexity of a checkpoint or a freshly built variant.
    Bench {
        #[arg(long, conflicts_with_all = ["variant", "scheme"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "MULTI")]
        variant: HeadVariant,
        #[arg(long, default_value = "DHA")]
        scheme: AggregationScheme,
        #[arg(long, default_value_t = 352)]
        size: usize,
        #[arg(long, default_value_t = TIMED_ITERATIONS)]
        n_images: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        /// Annotation only; computation runs in fp32.
        #[arg(long, default_value = "fp32")]
        precision: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/bench")]
        output_dir: PathBuf,
    },
    /// Print the encoder plan table.
    InspectTopology {
        /// Only this harmonic block (0-based).
        #[arg(long)]
        block: Option<usize>,
    },
    /// Print the default run configuration.
    PrintConfig,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Manifest(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Entry point shared by the binary and tests. `env` resolves environment
/// overrides.
pub fn run<I, T>(
    args: I,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, env, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, env: &dyn Fn(&str) -> Option<String>, out: &mut dyn Write) -> Result<()> {
    let output_override = env(ENV_OUTPUT_DIR).map(PathBuf::from);
    match cmd {
        Command::Train { config } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env(env)?;
            cmd_train(&cfg, out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            size,
            batch_size,
            output_dir,
        } => {
            let dir = output_override.unwrap_or(output_dir);
            let report = cmd_eval(&checkpoint, &manifest, &split, size, batch_size, &dir)?;
            write_out(out, &report.to_kv_text())
        }
        Command::Bench {
            checkpoint,
            variant,
            scheme,
            size,
            n_images,
            warmup,
            precision,
            seed,
            output_dir,
        } => {
            let seed = env(ENV_SEED).map(|s| parse_seed(&s)).transpose()?.unwrap_or(seed);
            let dir = output_override.unwrap_or(output_dir);
            let model = match checkpoint {
                Some(p) => BlazeNeo::from_checkpoint(&p, DType::F32)?,
                None => BlazeNeo::build(
                    ModelConfig {
                        variant,
                        scheme,
                        rfb_channels: DEFAULT_RFB_CHANNELS,
                    },
                    DType::F32,
                    seed,
                )?,
            };
            let text = cmd_bench(&model, size, n_images, warmup, &precision, seed, &dir)?;
            write_out(out, &text)
        }
        Command::InspectTopology { block } => {
            let text = render_plan(&plan_hardnet68(), block).map_err(|e| match e {
                Error::InvalidInput(m) => Error::config("--block", m),
                other => other,
            })?;
            write_out(out, &text)
        }
        Command::PrintConfig => write_out(out, &RunConfig::default().to_toml()),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [("metrics.txt", report.to_kv_text()), ("metrics.json", report.to_json())] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Trains per `cfg`, then evaluates the best checkpoint (or the final
/// weights when no validation pass ran) on the validation split.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<MetricReport> {
    cfg.validate()?;
    let manifest = cfg.data.manifest.as_deref().expect("validated");
    let train_set = load_samples(manifest, &cfg.data.train_split)?;
    if train_set.is_empty() {
        return Err(Error::config(
            "data.train_split",
            format!("no `{}` rows in {}", cfg.data.train_split, manifest.display()),
        ));
    }
    let val_set = load_samples(manifest, &cfg.data.val_split)?;
    let model = BlazeNeo::build(cfg.model.model_config(), DType::F32, cfg.seed)?;
    if let Some(w) = &cfg.model.encoder_weights {
        model.load_encoder(w)?;
    }
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;

    let tc = cfg.train_config();
    let state = train(&model, &train_set, &val_set, &tc, Some(dir))?;
    let best = dir.join(BEST_CHECKPOINT);
    if best.is_file() {
        model.load(&best)?;
    }
    let eval_set: Vec<Sample> = if val_set.is_empty() { &train_set } else { &val_set }
        .iter()
        .map(|s| resize_square(s, tc.eval_size))
        .collect();
    let report = evaluate(&model, &eval_set, tc.optim.batch_size)?;
    write_report(dir, &report)?;
    write_out(
        out,
        &format!("steps={}\nepochs={}\n{}", state.step, state.epoch, report.to_kv_text()),
    )?;
    Ok(report)
}

pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    split: &str,
    size: usize,
    batch_size: usize,
    out_dir: &Path,
) -> Result<MetricReport> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::config("--size", format!("{size} is not a positive multiple of {INPUT_MULTIPLE}")));
    }
    if !manifest.is_file() {
        return Err(Error::config("--manifest", format!("{} does not exist", manifest.display())));
    }
    let model = BlazeNeo::from_checkpoint(checkpoint, DType::F32)?;
    let samples: Vec<Sample> = load_samples(manifest, split)?
        .iter()
        .map(|s| resize_square(s, size))
        .collect();
    let report = evaluate(&model, &samples, batch_size)?;
    write_report(out_dir, &report)?;
    Ok(report)
}

/// Random normalized inputs, deterministic per seed.
fn bench_inputs(n: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data: Vec<f32> = (0..3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
            Ok(Tensor::from_vec(data, (1, 3, size, size), &Device::Cpu)?)
        })
        .collect()
}

pub fn cmd_bench(
    model: &BlazeNeo,
    size: usize,
    n_images: usize,
    warmup: usize,
    precision: &str,
    seed: u64,
    out_dir: &Path,
) -> Result<String> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::config("--size", format!("{size} is not a positive multiple of {INPUT_MULTIPLE}")));
    }
    if n_images < TIMED_ITERATIONS {
        return Err(Error::config("--n-images", format!("needs at least {TIMED_ITERATIONS}")));
    }
    let complexity = ComplexityReport::of(model, size, size)?;
    let inputs = bench_inputs(n_images, size, seed)?;
    let mut target = ModelTarget { model };
    let latency = measure(&mut target, &inputs, warmup, precision)?;
    latency.write(out_dir)?;
    complexity.write(out_dir)?;
    Ok(format!("{}{}", complexity.to_kv_text(), latency.to_kv_text()))
}
