//! Full-reference and no-reference video quality assessment.
//!
//! The pipeline is: decode planar video ([`videoio`]), sample one frame per
//! second and resize, run a multi-stage convolutional backbone
//! ([`backbone`]), turn the feature pyramids into quality-aware vectors
//! ([`features`]), regress frame scores with a two-layer MLP and average
//! them per video ([`model`]). Models are trained with a correlation loss,
//! either by pretrain/fine-tune transfer (FR) or by iterative mixed-dataset
//! training with per-dataset heads (NR) ([`training`]), and evaluated with
//! SRCC/KRCC/PLCC/RMSE ([`metrics`]).
//!
//! Everything numeric runs in `f64` on a small reverse-mode differentiation
//! engine ([`diffcore`]) so that gradients can be checked against finite
//! differences.

pub mod backbone;
pub mod datasetio;
pub mod diffcore;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod videoio;

pub use backbone::{BackboneConfig, FeaturePyramid};
pub use datasetio::{DatasetManifest, ManifestRecord, Split};
pub use diffcore::{Adam, AdamConfig, Checkpoint, Graph, NodeId, ParamStore};
pub use error::{Error, Result};
pub use features::{QualityFeatureVector, SimilarityConfig};
pub use metrics::MetricsReport;
pub use model::{ModelKind, QualityModel, RegressorParams, VideoScore};
pub use tensor::Tensor;
pub use training::{ImdtSchedule, TrainConfig, TrainState};
pub use videoio::{FrameSequence, PixelFormat, Rational, RgbFrame, SampledClip};

/// Toolkit version recorded in checkpoints and run records.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
