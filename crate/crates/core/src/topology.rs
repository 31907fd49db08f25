//! Harmonic dense connectivity and the HarDNet-68 stage plan.
//!
//! Everything here is integer bookkeeping: which earlier layers feed layer
//! `l` of a harmonic block, how wide each layer is, and how the encoder
//! stages are laid out. No tensors are touched.

use std::fmt::Write as _;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Embedded, versioned HarDNet-68 stage constants.
pub const HARDNET68_PLAN_TOML: &str = include_str!("../plans/hardnet68.toml");

/// Layers `l - 2^n` (n >= 0, 2^n | l, l - 2^n >= 0), nearest first.
pub fn skip_sources(l: usize) -> Vec<usize> {
    let mut sources = Vec::new();
    let mut step = 1usize;
    while step <= l {
        if l % step == 0 {
            sources.push(l - step);
        }
        match step.checked_mul(2) {
            Some(next) => step = next,
            None => break,
        }
    }
    sources
}

/// Largest `x` such that `2^x` divides `l` (`l >= 1`).
fn two_adic_order(l: usize) -> u32 {
    l.trailing_zeros()
}

/// Channel width of computed layer `l`: `k * m^x` floored to an even integer,
/// where `2^x` is the largest power of two dividing `l`.
///
/// The growth rate must be even so that every computed layer is at least `k`
/// wide after flooring.
pub fn layer_width(l: usize, k: usize, m: f64) -> Result<usize> {
    if l == 0 {
        return Err(Error::Topology(
            "layer 0 is the block input; its width is the block's input channels".into(),
        ));
    }
    if k == 0 || k % 2 != 0 {
        return Err(Error::Topology(format!(
            "growth rate must be a positive even integer, got {k}"
        )));
    }
    if !(m > 1.0) || !m.is_finite() {
        return Err(Error::Topology(format!(
            "compression factor must be a finite ratio > 1, got {m}"
        )));
    }
    let raw = k as f64 * m.powi(two_adic_order(l) as i32);
    // Guard against k * m^x landing a hair under an even integer.
    let floored = (raw + 1e-9).floor() as usize;
    Ok(floored / 2 * 2)
}

/// One layer of a harmonic block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub index: usize,
    pub out_channels: usize,
    pub skip_sources: Vec<usize>,
    /// Sum of `out_channels` over `skip_sources`; zero for the input layer.
    pub concat_in_channels: usize,
}

/// Connectivity of a whole harmonic block. `layers[0]` is the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub growth: usize,
    pub compression: f64,
    pub layers: Vec<LayerPlan>,
    pub output_layer_indices: Vec<usize>,
    pub block_out_channels: usize,
}

impl BlockPlan {
    pub fn in_channels(&self) -> usize {
        self.layers[0].out_channels
    }

    /// Number of computed (3x3 conv) layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }
}

/// Plans a harmonic block with `num_layers` computed layers.
///
/// The block output concatenates every odd-indexed computed layer plus the
/// final layer; the input layer is not part of the output.
pub fn plan_block(num_layers: usize, in_channels: usize, k: usize, m: f64) -> Result<BlockPlan> {
    if num_layers == 0 {
        return Err(Error::Topology("a block needs at least one layer".into()));
    }
    if in_channels == 0 {
        return Err(Error::Topology("block input channels must be positive".into()));
    }
    let mut layers = Vec::with_capacity(num_layers + 1);
    layers.push(LayerPlan {
        index: 0,
        out_channels: in_channels,
        skip_sources: Vec::new(),
        concat_in_channels: 0,
    });
    for l in 1..=num_layers {
        let sources = skip_sources(l);
        let concat_in_channels = sources.iter().map(|&s| layers[s].out_channels).sum();
        layers.push(LayerPlan {
            index: l,
            out_channels: layer_width(l, k, m)?,
            skip_sources: sources,
            concat_in_channels,
        });
    }
    let output_layer_indices: Vec<usize> = (1..=num_layers)
        .filter(|&l| l % 2 == 1 || l == num_layers)
        .collect();
    let block_out_channels = output_layer_indices
        .iter()
        .map(|&l| layers[l].out_channels)
        .sum();
    Ok(BlockPlan {
        growth: k,
        compression: m,
        layers,
        output_layer_indices,
        block_out_channels,
    })
}

/// Pyramid level names, finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PyramidLevel {
    F3,
    F4,
    F5,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageKind {
    /// Conv + BN + ReLU6 in the stem.
    StemConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    HardBlock(BlockPlan),
    /// 1x1 Conv + BN + ReLU6 after each block.
    TransitionConv {
        in_channels: usize,
        out_channels: usize,
    },
    /// Max pooling; `kernel == 3` pools with padding 1.
    Downsample { kernel: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    /// Cumulative stride at this stage's output.
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidTap {
    pub level: PyramidLevel,
    pub stage: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hardnet68Plan {
    pub version: u32,
    pub stages: Vec<Stage>,
    /// Taps for f3, f4, f5 in that order.
    pub pyramid_taps: [PyramidTap; 3],
}

impl Hardnet68Plan {
    pub fn stride_of_stage(&self, stage: usize) -> Option<usize> {
        self.stages.get(stage).map(|s| s.stride)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &BlockPlan)> {
        self.stages.iter().enumerate().filter_map(|(i, s)| match &s.kind {
            StageKind::HardBlock(b) => Some((i, b)),
            _ => None,
        })
    }

    pub fn max_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).max().unwrap_or(1)
    }
}

#[derive(Debug, Deserialize)]
struct PlanFile {
    version: u32,
    compression: f64,
    stage: Vec<StageEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StageEntry {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    Block {
        layers: usize,
        growth: usize,
    },
    Transition {
        out: usize,
        tap: Option<PyramidLevel>,
    },
}

/// Parses a stage plan in the embedded TOML format.
pub fn parse_plan(text: &str) -> Result<Hardnet68Plan> {
    let file: PlanFile =
        toml::from_str(text).map_err(|e| Error::Topology(format!("plan file: {e}")))?;
    let mut stages = Vec::with_capacity(file.stage.len());
    let mut taps: Vec<PyramidTap> = Vec::new();
    let mut channels = 3usize;
    let mut stride = 1usize;
    for entry in file.stage {
        let kind = match entry {
            StageEntry::Conv {
                out,
                kernel,
                stride: s,
            } => {
                stride *= s;
                let k = StageKind::StemConv {
                    in_channels: channels,
                    out_channels: out,
                    kernel,
                    stride: s,
                };
                channels = out;
                k
            }
            StageEntry::Pool { kernel, stride: s } => {
                stride *= s;
                StageKind::Downsample { kernel, stride: s }
            }
            StageEntry::Block { layers, growth } => {
                let block = plan_block(layers, channels, growth, file.compression)?;
                channels = block.block_out_channels;
                StageKind::HardBlock(block)
            }
            StageEntry::Transition { out, tap } => {
                let k = StageKind::TransitionConv {
                    in_channels: channels,
                    out_channels: out,
                };
                channels = out;
                if let Some(level) = tap {
                    taps.push(PyramidTap {
                        level,
                        stage: stages.len(),
                        stride,
                        channels,
                    });
                }
                k
            }
        };
        stages.push(Stage {
            kind,
            stride,
            out_channels: channels,
        });
    }
    taps.sort_by_key(|t| t.level);
    let pyramid_taps: [PyramidTap; 3] = taps
        .try_into()
        .map_err(|t: Vec<PyramidTap>| Error::Topology(format!("expected 3 pyramid taps, found {}", t.len())))?;
    let levels = [PyramidLevel::F3, PyramidLevel::F4, PyramidLevel::F5];
    if pyramid_taps.iter().map(|t| t.level).ne(levels) {
        return Err(Error::Topology("pyramid taps must be exactly f3, f4, f5".into()));
    }
    if pyramid_taps[0].stride >= pyramid_taps[1].stride || pyramid_taps[1].stride >= pyramid_taps[2].stride {
        return Err(Error::Topology("pyramid taps must sit at distinct increasing strides".into()));
    }
    Ok(Hardnet68Plan {
        version: file.version,
        stages,
        pyramid_taps,
    })
}

/// The HarDNet-68 encoder plan from the embedded plan file.
pub fn plan_hardnet68() -> Hardnet68Plan {
    parse_plan(HARDNET68_PLAN_TOML).expect("embedded HarDNet-68 plan is valid")
}

/// Plain-text table of one block: one row per layer.
pub fn render_block(out: &mut String, block_no: usize, stage: &Stage, block: &BlockPlan) {
    let _ = writeln!(
        out,
        "block {block_no}  stride {}  layers {}  growth {}  compression {}  in {}  out {}",
        stage.stride,
        block.num_layers(),
        block.growth,
        block.compression,
        block.in_channels(),
        block.block_out_channels
    );
    let _ = writeln!(out, "{:>5}  {:>5}  {:<16}  {:>9}  {}", "layer", "width", "sources", "concat_in", "output");
    for layer in &block.layers {
        let sources = if layer.skip_sources.is_empty() {
            "-".to_string()
        } else {
            layer
                .skip_sources
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let is_out = if block.output_layer_indices.contains(&layer.index) { "*" } else { "" };
        let _ = writeln!(
            out,
            "{:>5}  {:>5}  {:<16}  {:>9}  {}",
            layer.index, layer.out_channels, sources, layer.concat_in_channels, is_out
        );
    }
}

/// Renders the full plan, or only block `only_block` (0-based) when given.
pub fn render_plan(plan: &Hardnet68Plan, only_block: Option<usize>) -> Result<String> {
    let blocks: Vec<(usize, &BlockPlan)> = plan.blocks().collect();
    let mut out = String::new();
    if let Some(b) = only_block {
        let (stage_idx, block) = blocks.get(b).ok_or_else(|| {
            Error::InvalidInput(format!(
                "block index {b} out of range (plan has {} blocks)",
                blocks.len()
            ))
        })?;
        render_block(&mut out, b, &plan.stages[*stage_idx], block);
        return Ok(out);
    }
    let _ = writeln!(out, "hardnet68 plan v{}", plan.version);
    let _ = writeln!(out, "{:>5}  {:<10}  {:>6}  {:>8}  {}", "stage", "kind", "stride", "channels", "detail");
    for (i, stage) in plan.stages.iter().enumerate() {
        let (kind, detail) = match &stage.kind {
            StageKind::StemConv { kernel, stride, .. } => ("conv", format!("{kernel}x{kernel} s{stride}")),
            StageKind::HardBlock(b) => ("block", format!("{} layers k={}", b.num_layers(), b.growth)),
            StageKind::TransitionConv { .. } => ("transition", "1x1".to_string()),
            StageKind::Downsample { kernel, stride } => ("pool", format!("max {kernel}x{kernel} s{stride}")),
        };
        let tap = plan
            .pyramid_taps
            .iter()
            .find(|t| t.stage == i)
            .map(|t| format!("  -> {:?}", t.level).to_lowercase())
            .unwrap_or_default();
        let _ = writeln!(out, "{:>5}  {:<10}  {:>6}  {:>8}  {detail}{tap}", i, kind, stage.stride, stage.out_channels);
    }
    for (b, (stage_idx, block)) in blocks.iter().enumerate() {
        out.push('\n');
        render_block(&mut out, b, &plan.stages[*stage_idx], block);
    }
    Ok(out)
}
