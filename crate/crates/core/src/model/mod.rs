//! Toy unimodal encoders, the cross-modal encoder with attention tracing,
//! momentum copies and checkpoint files.

mod checkpoint;
mod config;
mod momentum;
mod net;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use momentum::{momentum_update, MomentumState};
pub use net::{AttentionTrace, EncoderOutput, FusionOutput, HeadTrace, ImageMemory, Net};
pub use params::{
    AttentionParams, CrossBlock, EncoderBlock, FeedForwardParams, ImageEncoderParams, LayerNormParams, Layout, Linear,
    ParamId, ParamStore, Params, TextEncoderParams, INIT_TAU,
};
