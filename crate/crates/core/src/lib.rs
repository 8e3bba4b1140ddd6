//! Convolutional network training with stochastic downsampling points.
//!
//! A network trained this way is a family of networks sharing every
//! parameter: each member ("instance") average-pools the feature maps after
//! one chosen block by a fractional ratio, and costs fewer FLOPs the earlier
//! and harder it downsamples. Instances are drawn at random per mini-batch
//! during training and chosen by budget at inference, each with its own
//! calibrated batch-norm statistics.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bn_store;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod downsample;
pub mod error;
pub mod eval;
pub mod layers;
pub mod rng;
pub mod tensor;
pub mod train;

pub use downsample::{enumerate_instances, sdpoint_forward, InstanceCatalog, SDPointInstance};
pub use error::{Error, Result};
pub use layers::{ChannelStats, LayerStack, NetworkSpec};
pub use rng::Rng;
pub use tensor::{Scalar, Shape4, Tensor4};
