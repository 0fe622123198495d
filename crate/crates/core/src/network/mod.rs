//! The causal spatiotemporal backbone.
//!
//! Each block is a causal `k_t x 1 x 1` temporal convolution followed by
//! per-frame GroupNorm and ReLU, then a strided `1 x 3 x 3` spatial
//! convolution followed by inference-mode BatchNorm and ReLU. Either
//! convolution may be depthwise-separable. There are no residual paths.

pub mod config;
pub mod io;
pub mod layers;
pub mod model;

pub use config::{BlockConfig, HeadConfig, LayerGeometry, LayerKind, ModelConfig, NormKind, TensorSpec, HEAD_OUTPUTS};
pub use io::{load_model, save_model, ManifestEntry};
pub use layers::{
    batch_norm_inference, group_norm_frames, spatial_conv, spatial_conv_frame, temporal_contract,
    temporal_conv_aligned, temporal_conv_causal, BatchNorm, GroupNorm, SpatialConv, SpatialKernel,
    TemporalAlignment, TemporalConv, TemporalKernel,
};
pub use model::{
    backbone_forward, init_model, st_block_forward, Block, Head, Model, ModelWeights, NamedTensor,
    Tap, Trace,
};
