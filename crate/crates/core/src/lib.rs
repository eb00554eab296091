//! Negotiated-label training for small convolutional networks.
//!
//! The crate is a self-contained CPU training engine (dense tensors, im2col
//! convolution, max pooling, dropout, softmax/cross-entropy, momentum SGD)
//! plus the negotiation machinery: a [`LabelStore`] whose soft training targets
//! are repeatedly replaced by a convex blend of the current targets and the
//! model's own predictions, under a linearly rising negotiation rate.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what the trainer, the CLI
//! and every reproducibility guarantee are built on.
//!
//! # Modules
//!
//! - [`tensor`]: dense row-major arrays and the numeric kernels.
//! - [`nn`]: layers, network specs and presets, loss, SGD, checkpoints.
//! - [`negotiation`]: label blending, the negotiation schedule, label store.
//! - [`data`]: IDX / CIFAR binary loaders, subsetting, dataset manifests.
//! - [`trainer`]: baseline and negotiated training loops, metrics.
//! - [`gradcheck`]: finite-difference gradient verification.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod negotiation;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Network = nn::Network<f64>;
pub type LabelMatrix = negotiation::LabelMatrix<f64>;
pub type LabelStore = negotiation::LabelStore<f64>;
pub type Dataset = data::Dataset<f64>;
pub type TrainOutcome = trainer::TrainOutcome<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Network32 = nn::Network<f32>;
pub type LabelMatrix32 = negotiation::LabelMatrix<f32>;
pub type LabelStore32 = negotiation::LabelStore<f32>;
pub type Dataset32 = data::Dataset<f32>;
