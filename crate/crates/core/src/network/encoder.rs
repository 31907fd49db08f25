use candle_core::Tensor;

use super::layers::{Act, Chw, ConvBnAct, Mode, OpCount};
use super::params::Scope;
use crate::error::{Error, Result};
use crate::ops::{max_pool2d, ConvGeom};
use crate::topology::{BlockPlan, Hardnet68Plan, StageKind};

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

/// The three retained encoder levels, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Stride 4.
    pub f3: Tensor,
    /// Stride 8.
    pub f4: Tensor,
    /// Stride 16.
    pub f5: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.f3, &self.f4, &self.f5]
    }
}

pub struct HarmonicBlock {
    plan: BlockPlan,
    layers: Vec<ConvBnAct>,
}

impl HarmonicBlock {
    pub fn new(scope: &Scope<'_>, plan: &BlockPlan) -> Result<Self> {
        let layers = plan.layers[1..]
            .iter()
            .map(|l| {
                ConvBnAct::new(
                    &scope.sub(format!("layer{}", l.index)),
                    l.concat_in_channels,
                    l.out_channels,
                    ConvGeom::same(3, 1),
                    Act::Relu6,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            plan: plan.clone(),
            layers,
        })
    }

    fn gather(outputs: &[Tensor], indices: &[usize]) -> Result<Tensor> {
        if let [single] = indices {
            return Ok(outputs[*single].clone());
        }
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &outputs[i]).collect();
        Ok(Tensor::cat(&parts, 1)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.clone());
        for (layer, lp) in self.layers.iter().zip(&self.plan.layers[1..]) {
            let input = Self::gather(&outputs, &lp.skip_sources)?;
            outputs.push(layer.forward(&input, mode)?);
        }
        Self::gather(&outputs, &self.plan.output_layer_indices)
    }

    pub fn cost(&self, (_, h, w): Chw) -> (Chw, OpCount) {
        let mut ops = OpCount::default();
        for (layer, lp) in self.layers.iter().zip(&self.plan.layers[1..]) {
            ops += layer.cost((lp.concat_in_channels, h, w)).1;
        }
        ((self.plan.block_out_channels, h, w), ops)
    }
}

enum EncoderStage {
    Conv(ConvBnAct),
    Pool { kernel: usize, stride: usize },
    Block(HarmonicBlock),
}

impl EncoderStage {
    fn pool_pad(kernel: usize) -> usize {
        (kernel - 1) / 2
    }
}

pub struct Encoder {
    plan: Hardnet68Plan,
    stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(scope: &Scope<'_>, plan: Hardnet68Plan) -> Result<Self> {
        let mut stages = Vec::with_capacity(plan.stages.len());
        for (i, stage) in plan.stages.iter().enumerate() {
            let s = scope.sub(format!("stage{i}"));
            stages.push(match &stage.kind {
                StageKind::StemConv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                } => EncoderStage::Conv(ConvBnAct::new(
                    &s,
                    *in_channels,
                    *out_channels,
                    ConvGeom::new(*kernel, *stride, kernel / 2, 1),
                    Act::Relu6,
                )?),
                StageKind::TransitionConv {
                    in_channels,
                    out_channels,
                } => EncoderStage::Conv(ConvBnAct::new(
                    &s,
                    *in_channels,
                    *out_channels,
                    ConvGeom::new(1, 1, 0, 1),
                    Act::Relu6,
                )?),
                StageKind::Downsample { kernel, stride } => EncoderStage::Pool {
                    kernel: *kernel,
                    stride: *stride,
                },
                StageKind::HardBlock(b) => EncoderStage::Block(HarmonicBlock::new(&s, b)?),
            });
        }
        Ok(Self { plan, stages })
    }

    pub fn plan(&self) -> &Hardnet68Plan {
        &self.plan
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::InvalidInput(format!(
                "input size {h}x{w}: height and width must be positive multiples of {INPUT_MULTIPLE}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected a 3-channel image, got {c} channels")));
        }
        Self::check_input(h, w)?;
        let taps = self.plan.pyramid_taps;
        let mut found: Vec<Tensor> = Vec::with_capacity(3);
        let mut x = image.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            x = match stage {
                EncoderStage::Conv(conv) => conv.forward(&x, mode)?,
                EncoderStage::Pool { kernel, stride } => {
                    max_pool2d(&x, *kernel, *stride, EncoderStage::pool_pad(*kernel))?
                }
                EncoderStage::Block(b) => b.forward(&x, mode)?,
            };
            if taps.iter().any(|t| t.stage == i) {
                found.push(x.clone());
            }
            if found.len() == 3 {
                break;
            }
        }
        let [f3, f4, f5]: [Tensor; 3] = found
            .try_into()
            .map_err(|_| Error::Topology("encoder plan did not produce three taps".into()))?;
        Ok(FeaturePyramid { f3, f4, f5 })
    }

    /// Output shapes of the three taps and the operation count to reach them.
    pub fn cost(&self, h: usize, w: usize) -> ([Chw; 3], OpCount) {
        let mut shape: Chw = (3, h, w);
        let mut ops = OpCount::default();
        let mut taps = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let (next, o) = match stage {
                EncoderStage::Conv(conv) => conv.cost(shape),
                EncoderStage::Block(b) => b.cost(shape),
                EncoderStage::Pool { kernel, stride } => {
                    let g = ConvGeom::new(*kernel, *stride, EncoderStage::pool_pad(*kernel), 1);
                    let (ho, wo) = g.out_size(shape.1, shape.2);
                    let out = shape.0 * ho * wo;
                    ((shape.0, ho, wo), OpCount::elementwise(out * kernel * kernel))
                }
            };
            shape = next;
            ops += o;
            if self.plan.pyramid_taps.iter().any(|t| t.stage == i) {
                taps.push(shape);
            }
            if taps.len() == 3 {
                break;
            }
        }
        ([taps[0], taps[1], taps[2]], ops)
    }
}
