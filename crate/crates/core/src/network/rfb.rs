//! Receptive field block in its lightweight form.
//!
//! Three branches of increasing receptive field are concatenated and
//! projected back with a 1x1 convolution, then added to a 1x1 shortcut:
//!
//! ```text
//! branch0: 1x1
//! branch1: 1x1 -> 3x3 (dilation 3)
//! branch2: 1x1 -> 3x3 -> 3x3 (dilation 5)
//! out = relu(proj(cat(branch0, branch1, branch2)) + shortcut(x))
//! ```

use candle_core::Tensor;

use super::layers::{Act, Chw, ConvBnAct, Mode, OpCount};
use super::params::Scope;
use crate::error::Result;
use crate::ops::ConvGeom;

pub struct Rfb {
    branches: Vec<Vec<ConvBnAct>>,
    proj: ConvBnAct,
    shortcut: ConvBnAct,
}

impl Rfb {
    pub fn new(scope: &Scope<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        let point = ConvGeom::new(1, 1, 0, 1);
        let b = |i: usize| scope.sub(format!("branch{i}"));
        let branch0 = vec![ConvBnAct::new(&b(0).sub("0"), in_ch, out_ch, point, Act::Identity)?];
        let branch1 = vec![
            ConvBnAct::new(&b(1).sub("0"), in_ch, out_ch, point, Act::Relu)?,
            ConvBnAct::new(&b(1).sub("1"), out_ch, out_ch, ConvGeom::same(3, 3), Act::Identity)?,
        ];
        let branch2 = vec![
            ConvBnAct::new(&b(2).sub("0"), in_ch, out_ch, point, Act::Relu)?,
            ConvBnAct::new(&b(2).sub("1"), out_ch, out_ch, ConvGeom::same(3, 1), Act::Relu)?,
            ConvBnAct::new(&b(2).sub("2"), out_ch, out_ch, ConvGeom::same(3, 5), Act::Identity)?,
        ];
        Ok(Self {
            branches: vec![branch0, branch1, branch2],
            proj: ConvBnAct::new(&scope.sub("proj"), 3 * out_ch, out_ch, point, Act::Identity)?,
            shortcut: ConvBnAct::new(&scope.sub("shortcut"), in_ch, out_ch, point, Act::Identity)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut y = x.clone();
            for conv in branch {
                y = conv.forward(&y, mode)?;
            }
            outs.push(y);
        }
        let merged = self.proj.forward(&Tensor::cat(&outs, 1)?, mode)?;
        let short = self.shortcut.forward(x, mode)?;
        Ok((merged + short)?.relu()?)
    }

    pub fn cost(&self, shape: Chw) -> (Chw, OpCount) {
        let mut ops = OpCount::default();
        let mut cat_channels = 0;
        let mut out = shape;
        for branch in &self.branches {
            let mut s = shape;
            for conv in branch {
                let (next, o) = conv.cost(s);
                s = next;
                ops += o;
            }
            cat_channels += s.0;
            out = s;
        }
        let (merged, o) = self.proj.cost((cat_channels, out.1, out.2));
        ops += o;
        ops += self.shortcut.cost(shape).1;
        let n = merged.0 * merged.1 * merged.2;
        // residual add + relu
        ops += OpCount::elementwise(2 * n);
        (merged, ops)
    }
}
