//! Multi-scale feature aggregation over the three RFB outputs.
//!
//! Each scheme is a small DAG of fusion nodes. A node resizes all of its
//! inputs to its own level, concatenates them and applies
//! 3x3 conv -> BN -> ReLU. Levels are 0 (stride 4), 1 (stride 8) and
//! 2 (stride 16); the last node of every scheme sits at level 0.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{Act, Chw, ConvBnAct, Mode, OpCount};
use super::params::Scope;
use crate::error::{Error, Result};
use crate::ops::{resize_bilinear, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregationScheme {
    /// Long skip connections (U-Net style top-down path).
    Lsc,
    /// Iterative deep aggregation: repeated fusion at the finest level.
    Ida,
    /// IDA with dense skips into the iterated nodes.
    Dia,
    /// DIA whose output is re-combined with the high-level maps.
    Dha,
}

impl AggregationScheme {
    pub const ALL: [AggregationScheme; 4] = [Self::Lsc, Self::Ida, Self::Dia, Self::Dha];

    pub fn graph(self) -> Vec<FusionNode> {
        use Source::{Level as L, Node as N};
        let node = |level, inputs: &[Source]| FusionNode {
            level,
            inputs: inputs.to_vec(),
        };
        match self {
            Self::Lsc => vec![node(1, &[L(1), L(2)]), node(0, &[L(0), N(0)])],
            Self::Ida => vec![
                node(1, &[L(1), L(2)]),
                node(0, &[L(0), L(1)]),
                node(0, &[N(1), N(0)]),
            ],
            Self::Dia => vec![
                node(1, &[L(1), L(2)]),
                node(0, &[L(0), L(1)]),
                node(0, &[L(0), N(1), N(0)]),
            ],
            Self::Dha => vec![
                node(1, &[L(1), L(2)]),
                node(0, &[L(0), L(1)]),
                node(0, &[L(0), N(1), N(0)]),
                node(0, &[N(2), N(0), L(2)]),
            ],
        }
    }
}

impl fmt::Display for AggregationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Lsc => "LSC",
            Self::Ida => "IDA",
            Self::Dia => "DIA",
            Self::Dha => "DHA",
        };
        f.write_str(s)
    }
}

impl FromStr for AggregationScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LSC" => Ok(Self::Lsc),
            "IDA" => Ok(Self::Ida),
            "DIA" => Ok(Self::Dia),
            "DHA" => Ok(Self::Dha),
            _ => Err(Error::InvalidInput(format!(
                "unknown aggregation scheme `{s}` (expected LSC, IDA, DIA or DHA)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// One of the three input maps.
    Level(usize),
    /// Output of an earlier fusion node.
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionNode {
    pub level: usize,
    pub inputs: Vec<Source>,
}

pub struct Aggregator {
    scheme: AggregationScheme,
    graph: Vec<FusionNode>,
    convs: Vec<ConvBnAct>,
}

impl Aggregator {
    pub fn new(scope: &Scope<'_>, scheme: AggregationScheme, channels: usize) -> Result<Self> {
        let graph = scheme.graph();
        let convs = graph
            .iter()
            .enumerate()
            .map(|(i, node)| {
                ConvBnAct::new(
                    &scope.sub(format!("node{i}")),
                    channels * node.inputs.len(),
                    channels,
                    ConvGeom::same(3, 1),
                    Act::Relu,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scheme,
            graph,
            convs,
        })
    }

    pub fn scheme(&self) -> AggregationScheme {
        self.scheme
    }

    pub fn check_levels(sizes: [(usize, usize); 3]) -> Result<()> {
        for i in 0..2 {
            let (fine, coarse) = (sizes[i], sizes[i + 1]);
            if fine.0 != 2 * coarse.0 || fine.1 != 2 * coarse.1 {
                return Err(Error::ShapeMismatch(format!(
                    "aggregation levels must halve exactly: level {i} is {}x{}, level {} is {}x{}",
                    fine.0,
                    fine.1,
                    i + 1,
                    coarse.0,
                    coarse.1
                )));
            }
        }
        Ok(())
    }

    /// Fuses maps at strides 4/8/16 into one map at stride 4.
    pub fn forward(&self, levels: [&Tensor; 3], mode: Mode) -> Result<Tensor> {
        let mut sizes = [(0, 0); 3];
        for (s, t) in sizes.iter_mut().zip(levels) {
            let (_, _, h, w) = t.dims4()?;
            *s = (h, w);
        }
        Self::check_levels(sizes)?;
        let mut nodes: Vec<Tensor> = Vec::with_capacity(self.graph.len());
        for (node, conv) in self.graph.iter().zip(&self.convs) {
            let (h, w) = sizes[node.level];
            let parts = node
                .inputs
                .iter()
                .map(|src| {
                    let t = match *src {
                        Source::Level(l) => levels[l],
                        Source::Node(n) => &nodes[n],
                    };
                    resize_bilinear(t, h, w)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = Tensor::cat(&parts, 1)?;
            nodes.push(conv.forward(&x, mode)?);
        }
        Ok(nodes.pop().expect("every scheme has at least one node"))
    }

    pub fn cost(&self, levels: [Chw; 3]) -> (Chw, OpCount) {
        let mut ops = OpCount::default();
        let mut shapes: Vec<Chw> = Vec::with_capacity(self.graph.len());
        for (node, conv) in self.graph.iter().zip(&self.convs) {
            let (_, h, w) = levels[node.level];
            let mut c = 0;
            for src in &node.inputs {
                let s = match *src {
                    Source::Level(l) => levels[l],
                    Source::Node(n) => shapes[n],
                };
                if (s.1, s.2) != (h, w) {
                    ops += OpCount::elementwise(s.0 * h * w);
                }
                c += s.0;
            }
            let (out, o) = conv.cost((c, h, w));
            ops += o;
            shapes.push(out);
        }
        (*shapes.last().expect("non-empty graph"), ops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graphs_end_at_finest_level_and_reference_earlier_nodes() {
        for scheme in AggregationScheme::ALL {
            let g = scheme.graph();
            assert_eq!(g.last().unwrap().level, 0);
            for (i, node) in g.iter().enumerate() {
                for src in &node.inputs {
                    match *src {
                        Source::Node(n) => assert!(n < i),
                        Source::Level(l) => assert!(l < 3),
                    }
                }
            }
        }
    }

    #[test]
    fn parse_and_display_round_trip() {
        for scheme in AggregationScheme::ALL {
            assert_eq!(scheme.to_string().parse::<AggregationScheme>().unwrap(), scheme);
        }
        assert!("XYZ".parse::<AggregationScheme>().is_err());
        assert_eq!("dha".parse::<AggregationScheme>().unwrap(), AggregationScheme::Dha);
    }

    #[test]
    fn level_check_requires_exact_halving() {
        assert!(Aggregator::check_levels([(88, 88), (44, 44), (22, 22)]).is_ok());
        assert!(Aggregator::check_levels([(88, 88), (44, 44), (21, 22)]).is_err());
        assert!(Aggregator::check_levels([(88, 88), (40, 44), (20, 22)]).is_err());
    }
}
