//! Prediction decoding and micro-averaged Dice / IoU.
//!
//! Tallies are pooled over every pixel of the evaluated set before any ratio
//! is taken. The generic polyp class treats any polyp label (undefined
//! included) as foreground; the neoplastic and non-neoplastic classes skip
//! pixels whose ground truth is undefined.

use std::fmt::Write as _;
use std::ops::AddAssign;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ClassMap;
use crate::error::{Error, Result};
use crate::losses::{BACKGROUND, NEOPLASTIC, NON_NEOPLASTIC, UNDEFINED};
use crate::network::{HeadVariant, MainMap, PredictionBundle};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn planes(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// Index of the largest value; ties go to the earliest position.
fn argmax_first(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Turns a prediction bundle into one class map per image.
///
/// Trinary maps take the per-pixel argmax over (neoplastic, non-neoplastic,
/// background). Binary pairs mark a pixel as polyp when the larger of the two
/// maps exceeds `threshold`, then pick the larger map. Ties resolve toward the
/// earlier channel in that order.
pub fn decode(bundle: &PredictionBundle, variant: HeadVariant, threshold: f64) -> Result<Vec<ClassMap>> {
    const CHANNEL_CLASS: [u8; 3] = [NEOPLASTIC, NON_NEOPLASTIC, BACKGROUND];
    match (&bundle.main, variant) {
        (MainMap::Trinary(tri), HeadVariant::St | HeadVariant::Multi) => {
            let (n, k, h, w) = tri.dims4()?;
            let data = planes(tri)?;
            let hw = h * w;
            Ok((0..n)
                .map(|b| {
                    let labels = (0..hw)
                        .map(|px| {
                            let mut v = [0f32; 3];
                            for (c, slot) in v.iter_mut().enumerate().take(k) {
                                *slot = data[(b * k + c) * hw + px];
                            }
                            CHANNEL_CLASS[argmax_first(&v[..k])]
                        })
                        .collect();
                    ClassMap::new(h, w, labels)
                })
                .collect())
        }
        (MainMap::Binary { neo, non }, HeadVariant::Sb) => {
            let (n, h, w) = neo.dims3()?;
            let neo = planes(neo)?;
            let non = planes(non)?;
            let hw = h * w;
            Ok((0..n)
                .map(|b| {
                    let labels = (0..hw)
                        .map(|px| {
                            let pair = [neo[b * hw + px], non[b * hw + px]];
                            if (pair[0].max(pair[1]) as f64) > threshold {
                                CHANNEL_CLASS[argmax_first(&pair)]
                            } else {
                                BACKGROUND
                            }
                        })
                        .collect();
                    ClassMap::new(h, w, labels)
                })
                .collect())
        }
        (_, v) => Err(Error::InvalidInput(format!(
            "prediction bundle does not match head variant {v}"
        ))),
    }
}

/// Pixel sums for one class: sum(u*v), sum(u), sum(v).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl Tally {
    fn add(&mut self, u: bool, v: bool) {
        self.intersection += (u && v) as u64;
        self.pred += u as u64;
        self.gt += v as u64;
    }

    /// 2i / (p + g); 1.0 when both sums are zero.
    pub fn dice(&self) -> f64 {
        let denom = self.pred + self.gt;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    /// i / (p + g - i); 1.0 when both sums are zero.
    pub fn iou(&self) -> f64 {
        let denom = self.pred + self.gt - self.intersection;
        if denom == 0 {
            1.0
        } else {
            self.intersection as f64 / denom as f64
        }
    }
}

impl AddAssign for Tally {
    fn add_assign(&mut self, o: Self) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.gt += o.gt;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTallies {
    pub seg: Tally,
    pub non: Tally,
    pub neo: Tally,
}

impl ConfusionTallies {
    pub fn accumulate(&mut self, predicted: &ClassMap, truth: &ClassMap) -> Result<()> {
        if (predicted.height, predicted.width) != (truth.height, truth.width) {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                predicted.height, predicted.width, truth.height, truth.width
            )));
        }
        for (&p, &g) in predicted.labels.iter().zip(&truth.labels) {
            self.seg.add(p == NEOPLASTIC || p == NON_NEOPLASTIC, g != BACKGROUND);
            if g == UNDEFINED {
                continue;
            }
            self.non.add(p == NON_NEOPLASTIC, g == NON_NEOPLASTIC);
            self.neo.add(p == NEOPLASTIC, g == NEOPLASTIC);
        }
        Ok(())
    }

    /// Associative, commutative merge of shard tallies.
    pub fn merge(&mut self, other: &ConfusionTallies) {
        self.seg += other.seg;
        self.non += other.non;
        self.neo += other.neo;
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            dice_seg: self.seg.dice(),
            iou_seg: self.seg.iou(),
            dice_non: self.non.dice(),
            iou_non: self.non.iou(),
            dice_neo: self.neo.dice(),
            iou_neo: self.neo.iou(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice_seg: f64,
    pub iou_seg: f64,
    pub dice_non: f64,
    pub iou_non: f64,
    pub dice_neo: f64,
    pub iou_neo: f64,
}

impl MetricReport {
    pub fn pairs(&self) -> [(&'static str, f64); 6] {
        [
            ("dice_seg", self.dice_seg),
            ("iou_seg", self.iou_seg),
            ("dice_non", self.dice_non),
            ("iou_non", self.iou_non),
            ("dice_neo", self.dice_neo),
            ("iou_neo", self.iou_neo),
        ]
    }

    /// One `metric=value` line per metric, four decimals.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k}={v:.4}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
