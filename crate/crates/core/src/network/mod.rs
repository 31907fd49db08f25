//! The segmentation network: HarDNet-68 encoder, per-level RFBs, a feature
//! aggregation scheme and one of three head variants.

pub mod aggregate;
pub mod encoder;
pub mod layers;
pub mod model;
pub mod params;
pub mod rfb;

pub use aggregate::{AggregationScheme, Aggregator};
pub use encoder::{Encoder, FeaturePyramid, INPUT_MULTIPLE};
pub use layers::{Mode, OpCount};
pub use model::{channel_softmax, sigmoid, BlazeNeo, HeadVariant, MainMap, ModelConfig, PredictionBundle, DEFAULT_RFB_CHANNELS};
pub use params::{checkpoint_element_count, ParamStore};
