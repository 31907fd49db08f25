use std::ops::{Add, AddAssign};

use candle_core::{Tensor, Var};

use super::params::{Init, Scope};
use crate::error::Result;
pub use crate::ops::Act;
use crate::ops::{affine_act_infer, batch_norm_train, conv2d, to_f64_vec, ConvGeom};

/// Forward mode. Batch normalization uses batch statistics in `Train` and
/// running statistics in `Infer`; the auxiliary branch only runs in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Operation tally for complexity reports.
///
/// `macs` covers convolutions (two floating-point ops each); `elementwise`
/// covers normalization, activations, interpolation, additions and pooling
/// comparisons at one op per element touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub macs: u64,
    pub elementwise: u64,
}

impl OpCount {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }

    pub fn elementwise(n: usize) -> Self {
        Self {
            macs: 0,
            elementwise: n as u64,
        }
    }
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, rhs: Self) -> Self {
        OpCount {
            macs: self.macs + rhs.macs,
            elementwise: self.elementwise + rhs.elementwise,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// (channels, height, width) of one sample.
pub type Chw = (usize, usize, usize);

pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(scope: &Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.weight("weight", &[channels], Init::Const(1.0))?,
            beta: scope.weight("bias", &[channels], Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Const(0.0))?,
            running_var: scope.buffer("running_var", &[channels], Init::Const(1.0))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Normalizes `x` and applies `act` in one fused pass. Train mode uses
    /// batch statistics and updates the running estimates.
    pub fn forward(&self, x: &Tensor, mode: Mode, act: Act) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (y, stats) =
                    batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps, act)?;
                let (n, _, h, w) = x.dims4()?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm = to_f64_vec(self.running_mean.as_tensor())?;
                let rv = to_f64_vec(self.running_var.as_tensor())?;
                let new_mean: Vec<f64> = rm.iter().zip(&stats).map(|(r, s)| (1.0 - m) * r + m * s.0).collect();
                let new_var: Vec<f64> =
                    rv.iter().zip(&stats).map(|(r, s)| (1.0 - m) * r + m * unbiased * s.1).collect();
                let dtype = x.dtype();
                let c = stats.len();
                self.running_mean
                    .set(&Tensor::from_vec(new_mean, c, x.device())?.to_dtype(dtype)?)?;
                self.running_var
                    .set(&Tensor::from_vec(new_var, c, x.device())?.to_dtype(dtype)?)?;
                Ok(y)
            }
            Mode::Infer => {
                let g = to_f64_vec(self.gamma.as_tensor())?;
                let b = to_f64_vec(self.beta.as_tensor())?;
                let rm = to_f64_vec(self.running_mean.as_tensor())?;
                let rv = to_f64_vec(self.running_var.as_tensor())?;
                let scale: Vec<f64> = g.iter().zip(&rv).map(|(g, v)| g / (v + self.eps).sqrt()).collect();
                let shift: Vec<f64> = b.iter().zip(&rm).zip(&scale).map(|((b, m), a)| b - m * a).collect();
                affine_act_infer(x, &scale, &shift, act)
            }
        }
    }
}

/// Bias-free convolution followed by batch normalization and an activation.
pub struct ConvBnAct {
    weight: Var,
    bn: BatchNorm,
    geom: ConvGeom,
    act: Act,
}

impl ConvBnAct {
    pub fn new(scope: &Scope<'_>, in_ch: usize, out_ch: usize, geom: ConvGeom, act: Act) -> Result<Self> {
        let k = geom.kernel;
        let weight = scope.sub("conv").weight(
            "weight",
            &[out_ch, in_ch, k, k],
            Init::KaimingNormal { fan_in: in_ch * k * k },
        )?;
        Ok(Self {
            weight,
            bn: BatchNorm::new(&scope.sub("bn"), out_ch)?,
            geom,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.geom)?;
        self.bn.forward(&y, mode, self.act)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn cost(&self, (c, h, w): Chw) -> (Chw, OpCount) {
        let (ho, wo) = self.geom.out_size(h, w);
        let o = self.out_channels();
        let k = self.geom.kernel;
        let out = o * ho * wo;
        let acts = if self.act == Act::Identity { 0 } else { out };
        let ops = OpCount {
            macs: (o * c * k * k * ho * wo) as u64,
            elementwise: (out + acts) as u64,
        };
        ((o, ho, wo), ops)
    }
}

/// 1x1 convolution with bias producing per-pixel logits.
pub struct Head {
    weight: Var,
    bias: Var,
}

impl Head {
    pub fn new(scope: &Scope<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.weight(
                "weight",
                &[out_ch, in_ch, 1, 1],
                Init::KaimingNormal { fan_in: in_ch },
            )?,
            bias: scope.weight("bias", &[out_ch], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let o = self.bias.dim(0)?;
        let y = conv2d(x, self.weight.as_tensor(), ConvGeom::new(1, 1, 0, 1))?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, o, 1, 1))?)?)
    }

    pub fn cost(&self, (c, h, w): Chw) -> (Chw, OpCount) {
        let o = self.bias.dims()[0];
        let ops = OpCount {
            macs: (o * c * h * w) as u64,
            elementwise: (o * h * w) as u64,
        };
        ((o, h, w), ops)
    }
}
