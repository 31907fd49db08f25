use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::aggregate::{AggregationScheme, Aggregator};
use super::encoder::{Encoder, FeaturePyramid};
use super::layers::{Chw, Head, Mode, OpCount};
use super::params::{read_checkpoint_metadata, ParamStore};
use super::rfb::Rfb;
use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::topology::plan_hardnet68;

/// Output-head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HeadVariant {
    /// Single head, two independent sigmoid maps (neoplastic, non-neoplastic).
    Sb,
    /// Single head, one softmax map over (neoplastic, non-neoplastic, background).
    St,
    /// Trinary main head plus a separately weighted auxiliary polyp branch
    /// that only runs during training.
    Multi,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [Self::Sb, Self::St, Self::Multi];

    fn main_channels(self) -> usize {
        match self {
            Self::Sb => 2,
            Self::St | Self::Multi => 3,
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sb => "SB",
            Self::St => "ST",
            Self::Multi => "MULTI",
        })
    }
}

impl FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SB" => Ok(Self::Sb),
            "ST" => Ok(Self::St),
            "MULTI" => Ok(Self::Multi),
            _ => Err(Error::InvalidInput(format!(
                "unknown head variant `{s}` (expected SB, ST or MULTI)"
            ))),
        }
    }
}

pub const DEFAULT_RFB_CHANNELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: HeadVariant,
    pub scheme: AggregationScheme,
    pub rfb_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: HeadVariant::Multi,
            scheme: AggregationScheme::Dha,
            rfb_channels: DEFAULT_RFB_CHANNELS,
        }
    }
}

impl ModelConfig {
    pub fn to_metadata(&self) -> HashMap<String, String> {
        HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("variant".to_string(), self.variant.to_string()),
            ("scheme".to_string(), self.scheme.to_string()),
            ("rfb_channels".to_string(), self.rfb_channels.to_string()),
        ])
    }

    pub fn from_metadata(meta: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key `{k}` missing")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format `{}`",
                get("format")?
            )));
        }
        Ok(Self {
            variant: get("variant")?.parse()?,
            scheme: get("scheme")?.parse()?,
            rfb_channels: get("rfb_channels")?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("rfb_channels: {e}")))?,
        })
    }
}

pub const CHECKPOINT_FORMAT: &str = "blazeneo-checkpoint/1";

/// Main output of a forward pass; all maps are probabilities at input resolution.
#[derive(Debug, Clone)]
pub enum MainMap {
    /// SB: (N, H, W) each.
    Binary { neo: Tensor, non: Tensor },
    /// ST / MULTI: (N, 3, H, W), channels (neoplastic, non-neoplastic, background).
    Trinary(Tensor),
}

#[derive(Debug, Clone)]
pub struct PredictionBundle {
    pub main: MainMap,
    /// MULTI in train mode only: (N, H, W) polyp probability.
    pub aux: Option<Tensor>,
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form keeps the backward pass finite for large |x|
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the channel dimension of an (N, C, H, W) tensor.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

struct Branch {
    agg: Aggregator,
    head: Head,
}

pub struct BlazeNeo {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    rfbs: [Rfb; 3],
    main: Branch,
    aux: Option<Branch>,
}

/// Name prefix of the auxiliary branch; excluded from inference counts.
pub const AUX_PREFIX: &str = "aux.";

impl BlazeNeo {
    /// Builds a freshly initialized model. `dtype` is F32 for training or F64
    /// for gradient checks; `seed` fixes the initialization.
    pub fn build(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.rfb_channels == 0 {
            return Err(Error::InvalidInput("rfb_channels must be positive".into()));
        }
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let plan = plan_hardnet68();
        let taps = plan.pyramid_taps;
        let encoder = Encoder::new(&root.sub("encoder"), plan)?;
        let c = config.rfb_channels;
        let dec = root.sub("decoder");
        let rfbs = [
            Rfb::new(&dec.sub("rfb3"), taps[0].channels, c)?,
            Rfb::new(&dec.sub("rfb4"), taps[1].channels, c)?,
            Rfb::new(&dec.sub("rfb5"), taps[2].channels, c)?,
        ];
        let branch = |name: &str, out: usize| -> Result<Branch> {
            let s = root.sub(name);
            Ok(Branch {
                agg: Aggregator::new(&s.sub("agg"), config.scheme, c)?,
                head: Head::new(&s.sub("head"), c, out)?,
            })
        };
        let main = branch("main", config.variant.main_channels())?;
        let aux = match config.variant {
            HeadVariant::Multi => Some(branch("aux", 1)?),
            _ => None,
        };
        Ok(Self {
            config,
            store,
            encoder,
            rfbs,
            main,
            aux,
        })
    }

    /// Builds the architecture recorded in a checkpoint and loads its weights.
    pub fn from_checkpoint(path: &Path, dtype: DType) -> Result<Self> {
        let meta = read_checkpoint_metadata(path)?;
        let config = ModelConfig::from_metadata(&meta)?;
        let model = Self::build(config, dtype, 0)?;
        model.store.load(path, "")?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.config.to_metadata())
    }

    /// Loads all weights; the first mismatching parameter name is reported.
    pub fn load(&self, path: &Path) -> Result<()> {
        self.store.load(path, "").map(|_| ())
    }

    /// Injects pretrained encoder weights (names under `encoder.`).
    pub fn load_encoder(&self, path: &Path) -> Result<()> {
        self.store.load(path, "encoder.").map(|_| ())
    }

    /// Learnable scalars used at inference (auxiliary branch excluded).
    pub fn inference_param_count(&self) -> usize {
        self.store.count_trainable(Some(AUX_PREFIX))
    }

    /// Learnable scalars trained, auxiliary branch included.
    pub fn training_param_count(&self) -> usize {
        self.store.count_trainable(None)
    }

    pub fn encode(&self, image: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        self.encoder.forward(image, mode)
    }

    pub fn rfb(&self, level: usize) -> &Rfb {
        &self.rfbs[level]
    }

    pub fn decode_features(&self, pyramid: &FeaturePyramid, mode: Mode) -> Result<[Tensor; 3]> {
        let [a, b, c] = pyramid.levels();
        Ok([
            self.rfbs[0].forward(a, mode)?,
            self.rfbs[1].forward(b, mode)?,
            self.rfbs[2].forward(c, mode)?,
        ])
    }

    /// Aggregates with the main branch's aggregator.
    pub fn aggregate(&self, rfb_outputs: [&Tensor; 3], mode: Mode) -> Result<Tensor> {
        self.main.agg.forward(rfb_outputs, mode)
    }

    /// Full forward pass. `image` is (N, 3, H, W) with H and W multiples of 32.
    pub fn forward(&self, image: &Tensor, mode: Mode) -> Result<PredictionBundle> {
        let (_, _, h, w) = image.dims4()?;
        let pyramid = self.encode(image, mode)?;
        let feats = self.decode_features(&pyramid, mode)?;
        let levels = [&feats[0], &feats[1], &feats[2]];
        let logits = self.main.head.forward(&self.main.agg.forward(levels, mode)?)?;
        let logits = resize_bilinear(&logits, h, w)?;
        let main = match self.config.variant {
            HeadVariant::Sb => {
                let p = sigmoid(&logits)?;
                MainMap::Binary {
                    neo: p.narrow(1, 0, 1)?.squeeze(1)?,
                    non: p.narrow(1, 1, 1)?.squeeze(1)?,
                }
            }
            HeadVariant::St | HeadVariant::Multi => MainMap::Trinary(channel_softmax(&logits)?),
        };
        let aux = match (&self.aux, mode) {
            (Some(branch), Mode::Train) => {
                let l = branch.head.forward(&branch.agg.forward(levels, mode)?)?;
                Some(sigmoid(&resize_bilinear(&l, h, w)?)?.squeeze(1)?)
            }
            _ => None,
        };
        Ok(PredictionBundle { main, aux })
    }

    /// Inference-time operation count at an (h, w) input.
    pub fn cost(&self, h: usize, w: usize) -> Result<OpCount> {
        Encoder::check_input(h, w)?;
        let (taps, mut ops) = self.encoder.cost(h, w);
        let mut levels: [Chw; 3] = [(0, 0, 0); 3];
        for (i, rfb) in self.rfbs.iter().enumerate() {
            let (s, o) = rfb.cost(taps[i]);
            levels[i] = s;
            ops += o;
        }
        let (fused, o) = self.main.agg.cost(levels);
        ops += o;
        let (logits, o) = self.main.head.cost(fused);
        ops += o;
        let full = logits.0 * h * w;
        // upsampling to input size + final activation
        ops += OpCount::elementwise(2 * full);
        Ok(ops)
    }
}
