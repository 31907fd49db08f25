//! Segmentation losses and per-variant totals.
//!
//! Class labels: 0 background, 1 non-neoplastic, 2 neoplastic, 3 undefined.
//! Main losses ignore undefined pixels; the auxiliary polyp loss uses every
//! pixel and counts undefined pixels as polyp.
//!
//! All functions take probability maps (post-activation) and return scalar
//! tensors so they can be back-propagated.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{HeadVariant, MainMap, PredictionBundle};

pub const BACKGROUND: u8 = 0;
pub const NON_NEOPLASTIC: u8 = 1;
pub const NEOPLASTIC: u8 = 2;
pub const UNDEFINED: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Tversky weight on false negatives.
    pub alpha: f64,
    /// Tversky weight on false positives.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Tversky smoothing and log clamp.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.75,
            smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.alpha) {
            return Err(Error::config("loss.alpha", "must lie in (0, 1)"));
        }
        if !in_unit(self.beta) {
            return Err(Error::config("loss.beta", "must lie in (0, 1)"));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::config("loss.beta", "alpha + beta must equal 1"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("loss.gamma", "must be positive"));
        }
        if !(self.smooth > 0.0 && self.smooth < 0.5) {
            return Err(Error::config("loss.smooth", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Ground-truth labels for a batch, (N, H, W) row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedTarget {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl MaskedTarget {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {n}x{h}x{w} target",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > UNDEFINED) {
            return Err(Error::InvalidInput(format!("label {bad} outside 0..=3")));
        }
        Ok(Self { n, h, w, labels })
    }

    fn map(&self, f: impl Fn(u8) -> bool, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.labels.iter().map(|&l| if f(l) { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (self.n, self.h, self.w), device)?.to_dtype(dtype)?)
    }

    /// 1 where the label is not undefined.
    pub fn valid_mask(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.map(|l| l != UNDEFINED, dtype, device)
    }

    /// 1 on any polyp pixel, undefined included.
    pub fn polyp_map(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.map(|l| l != BACKGROUND, dtype, device)
    }

    pub fn class_map(&self, class: u8, dtype: DType, device: &Device) -> Result<Tensor> {
        self.map(|l| l == class, dtype, device)
    }

    /// One-hot (N, 3, H, W) in channel order (neoplastic, non-neoplastic,
    /// background). Undefined pixels are all-zero.
    pub fn trinary_one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let planes = [
            self.class_map(NEOPLASTIC, dtype, device)?,
            self.class_map(NON_NEOPLASTIC, dtype, device)?,
            self.class_map(BACKGROUND, dtype, device)?,
        ];
        Ok(Tensor::stack(&planes, 1)?)
    }

    pub fn has_undefined(&self) -> bool {
        self.labels.contains(&UNDEFINED)
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn masked_mean(per_pixel: &Tensor, mask: Option<&Tensor>, what: &str) -> Result<Tensor> {
    match mask {
        None => Ok(per_pixel.mean_all()?),
        Some(m) => {
            check_same(per_pixel, m, what)?;
            let support = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if support <= 0.0 {
                return Err(Error::EmptySupport(format!("{what}: every pixel is masked out")));
            }
            Ok(((per_pixel * m)?.sum_all()? / support)?)
        }
    }
}

/// Binary cross entropy averaged over mask-true pixels (all pixels if `mask` is `None`).
pub fn bce(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>, smooth: f64) -> Result<Tensor> {
    check_same(pred, target, "bce prediction/target")?;
    let p = pred.clamp(smooth, 1.0 - smooth)?;
    let pos = (target * p.log()?)?;
    let neg = ((1.0 - target)? * (1.0 - &p)?.log()?)?;
    let nll = (pos + neg)?.neg()?;
    masked_mean(&nll, mask, "bce mask")
}

/// Categorical cross entropy. `pred` and `target_one_hot` are (N, K, H, W);
/// `mask` is (N, H, W) and must select at least one pixel.
pub fn cce(pred: &Tensor, target_one_hot: &Tensor, mask: &Tensor, smooth: f64) -> Result<Tensor> {
    check_same(pred, target_one_hot, "cce prediction/target")?;
    let p = pred.clamp(smooth, 1.0 - smooth)?;
    let nll = (target_one_hot * p.log()?)?.sum(1)?.neg()?;
    masked_mean(&nll, Some(mask), "cce mask")
}

/// Lifts (N, H, W) maps to (N, 1, H*W); (N, K, H, W) maps to (N, K, H*W).
fn as_classes(t: &Tensor) -> Result<Tensor> {
    Ok(match t.rank() {
        3 => {
            let (n, h, w) = t.dims3()?;
            t.reshape((n, 1, h * w))?
        }
        4 => {
            let (n, k, h, w) = t.dims4()?;
            t.reshape((n, k, h * w))?
        }
        r => return Err(Error::ShapeMismatch(format!("expected a rank 3 or 4 map, got rank {r}"))),
    })
}

/// Soft Tversky index per (image, class): (N, K).
pub fn tversky_index(pred: &Tensor, target: &Tensor, cfg: &LossConfig, mask: Option<&Tensor>) -> Result<Tensor> {
    check_same(pred, target, "tversky prediction/target")?;
    let p = as_classes(pred)?;
    let g = as_classes(target)?;
    let (p, g) = match mask {
        Some(m) => {
            let (n, h, w) = m.dims3()?;
            if (n, h * w) != (p.dim(0)?, p.dim(2)?) {
                return Err(Error::ShapeMismatch(format!(
                    "tversky mask {:?} vs prediction {:?}",
                    m.dims(),
                    pred.dims()
                )));
            }
            let m = m.reshape((n, 1, h * w))?;
            (p.broadcast_mul(&m)?, g.broadcast_mul(&m)?)
        }
        None => (p, g),
    };
    let tp = (&p * &g)?.sum(2)?;
    let fn_ = (g.sum(2)? - &tp)?;
    let fp = (p.sum(2)? - &tp)?;
    let num = (&tp + cfg.smooth)?;
    let den = ((&tp + (fn_ * cfg.alpha)?)? + (fp * cfg.beta)?)?;
    let den = (den + cfg.smooth)?;
    Ok((num / den)?)
}

/// Mean over images and classes of `1 - TI`.
pub fn tversky_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig, mask: Option<&Tensor>) -> Result<Tensor> {
    let ti = tversky_index(pred, target, cfg, mask)?;
    Ok((1.0 - ti)?.mean_all()?)
}

/// Mean over images and classes of `(1 - TI)^gamma`.
pub fn focal_tversky_loss(
    pred: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let ti = tversky_index(pred, target, cfg, mask)?;
    let one_minus = (1.0 - ti)?.clamp(1e-30, 1.0)?;
    Ok(one_minus.powf(cfg.gamma)?.mean_all()?)
}

/// Element-wise max of two probability maps.
pub fn polyp_map_from_pair(p_neo: &Tensor, p_non: &Tensor) -> Result<Tensor> {
    check_same(p_neo, p_non, "polyp map inputs")?;
    Ok(p_neo.maximum(p_non)?)
}

/// Loss components; `total` is exactly `main + aux`.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub main: Tensor,
    pub aux: Tensor,
}

fn binary_aux(pred: &Tensor, polyp: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok((bce(pred, polyp, None, cfg.smooth)? + tversky_loss(pred, polyp, cfg, None)?)?)
}

/// Variant-specific total loss.
///
/// - SB: main = BCE + FT on each of the two maps (summed), aux = BCE + T on their max.
/// - ST: main = CCE + FT on the trinary map, aux = BCE + T on max(neo, non) channels.
/// - MULTI: main as ST, aux = BCE + T on the auxiliary branch's map.
pub fn total_loss(
    bundle: &PredictionBundle,
    target: &MaskedTarget,
    variant: HeadVariant,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let (dtype, device) = match &bundle.main {
        MainMap::Binary { neo, .. } => (neo.dtype(), neo.device().clone()),
        MainMap::Trinary(t) => (t.dtype(), t.device().clone()),
    };
    let valid = target.valid_mask(dtype, &device)?;
    let polyp = target.polyp_map(dtype, &device)?;
    let (main, aux) = match (variant, &bundle.main) {
        (HeadVariant::Sb, MainMap::Binary { neo, non }) => {
            let g_neo = target.class_map(NEOPLASTIC, dtype, &device)?;
            let g_non = target.class_map(NON_NEOPLASTIC, dtype, &device)?;
            let neo_loss = (bce(neo, &g_neo, Some(&valid), cfg.smooth)?
                + focal_tversky_loss(neo, &g_neo, cfg, Some(&valid))?)?;
            let non_loss = (bce(non, &g_non, Some(&valid), cfg.smooth)?
                + focal_tversky_loss(non, &g_non, cfg, Some(&valid))?)?;
            let main = (neo_loss + non_loss)?;
            let aux = binary_aux(&polyp_map_from_pair(neo, non)?, &polyp, cfg)?;
            (main, aux)
        }
        (HeadVariant::St | HeadVariant::Multi, MainMap::Trinary(tri)) => {
            let one_hot = target.trinary_one_hot(dtype, &device)?;
            let main = (cce(tri, &one_hot, &valid, cfg.smooth)?
                + focal_tversky_loss(tri, &one_hot, cfg, Some(&valid))?)?;
            let aux_pred = if variant == HeadVariant::Multi {
                bundle.aux.clone().ok_or_else(|| {
                    Error::InvalidInput("MULTI loss needs the auxiliary map (train-mode forward)".into())
                })?
            } else {
                let neo = tri.narrow(1, 0, 1)?.squeeze(1)?;
                let non = tri.narrow(1, 1, 1)?.squeeze(1)?;
                polyp_map_from_pair(&neo, &non)?
            };
            (main, binary_aux(&aux_pred, &polyp, cfg)?)
        }
        (v, _) => {
            return Err(Error::InvalidInput(format!(
                "prediction bundle does not match head variant {v}"
            )))
        }
    };
    let total = (&main + &aux)?;
    Ok(LossParts { total, main, aux })
}
