//! Event-camera pupil tracking: event binning, event-domain augmentation,
//! a causal spatiotemporal network with streaming inference, detector
//! decoding, losses and compute accounting.
//!
//! ```
//! use evtrack::{bin_events, BinGrid, BinningMode, Event, EventSegment, Polarity, SensorGeometry};
//!
//! let geometry = SensorGeometry::default();
//! let segment = EventSegment::new(vec![Event::new(5_000, 320, 240, Polarity::Positive)], geometry)?;
//! let grid = BinGrid::covering(geometry, 5, 10_000, 0, 2)?;
//! let tensor = bin_events(&segment, &grid, BinningMode::CausalVolume)?;
//! assert_eq!(tensor.data.dim(), (2, 2, 96, 128));
//! # Ok::<(), evtrack::Error>(())
//! ```

pub mod augment;
pub mod binning;
pub mod detector;
pub mod error;
pub mod events;
pub mod metrics;
pub mod network;
pub mod streaming;

pub use augment::{
    build_affine, sample_params, temporal_affine, temporal_affine_labels, temporal_flip, transform_events,
    transform_labels, AffineMatrix, AffineParams, AugmentDraw, AugmentPolicy, FrameLabel,
};
pub use binning::{bin_events, read_tensor, write_tensor, BinGrid, BinningMode, EventTensor, StoredTensor};
pub use detector::{
    assign_targets, decode, focal_loss_cell, head_forward, segment_loss, smooth_l1, GridGeometry, LossConfig,
    PredGrid, TargetGrid,
};
pub use error::{Error, Result};
pub use events::{
    parse_event_csv, parse_label_csv, parse_predictions_csv, write_event_csv, write_label_csv,
    write_predictions_csv, Event, EventSegment, LabelSample, LabelTrack, Polarity, PupilPrediction,
    SensorGeometry,
};
pub use metrics::{count_macs, measure_sparsity, p10, ActivationProfile, MacReport, MetricsReport, SparsityProfile};
pub use network::{Model, ModelConfig, ModelWeights};
pub use streaming::{stream_init, stream_reset, stream_step, StreamState};
