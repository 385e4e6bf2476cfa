//! Multi-dimensional image quality assessment.
//!
//! The model scores an image along five technical dimensions (sharpness,
//! noisiness, brightness, contrast, colorfulness) and four aesthetic ones,
//! then fuses the per-dimension scores with image-adaptive weights into an
//! overall quality score. A trained model doubles as a tunable loss for
//! image restoration: scaling a dimension's weight steers the restorer
//! toward that dimension.
//!
//! Module map:
//!
//! - [`registry`]: dimension taxonomy and model configuration
//! - [`data`]: images, synthetic distortions with analytic labels, manifests, augmentation
//! - [`backbone`]: multi-scale feature extractors with gated local pooling
//! - [`heads`]: cross-scale attention, semantic injection, per-dimension regressors
//! - [`model`]: weight branch, fusion and the end-to-end model
//! - [`losses`]: hybrid IQA loss and the no-reference / full-reference restoration losses
//! - [`metrics`]: SRCC / PLCC and the repeated-split evaluation protocol
//! - [`train`]: two-stage training, AdamW, cosine schedule, checkpoints
//! - [`restore`]: toy restorer, restoration training and weight-ratio sweeps

pub mod backbone;
pub mod config;
pub mod data;
mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod restore;
pub mod train;

pub use config::MdiqaConfig;
pub use data::{DistortionKind, DistortionSpec, ImageTensor, MultiDimSample};
pub use error::{Error, Result};
pub use model::{Mdiqa, QualityOutput, WeightVector};
pub use registry::{Category, DimensionRegistry, ModelConfig};

pub use candle_core::{DType, Device, Tensor};
