//! Heatmap-based landmark detection.
//!
//! Landmarks are encoded as linear cones, a residual U-Net is trained on
//! them with a region-balanced L1 loss, and predictions are decoded by
//! argmax. Everything runs on the small reverse-mode autodiff engine in
//! [`autodiff`].

pub mod augment;
pub mod autodiff;
pub mod codec;
pub mod dataset;
pub mod error;
mod fsio;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use augment::{AffineMap, AffineParams, AugmentConfig};
pub use autodiff::{Graph, Var};
pub use codec::{CodecConfig, HeatmapStack, IndicatorMask, LandmarkSet, Peak, Point};
pub use dataset::{Dataset, Manifest, Sample};
pub use error::{Error, Result};
pub use loss::LossValue;
pub use model::{ModelConfig, UNetModel};
pub use optim::AdamState;
pub use tensor::{Scalar, Tensor};
pub use trainer::{EpochRecord, HeatmapPredictor, Metrics, TrainConfig, TrainHistory};

pub use fsio::write_atomic;
