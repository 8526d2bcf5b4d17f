//! Cascade visual pre-training for manipulation at desk scale.
//!
//! Pipeline: synthetic clip corpus ([`dataset`]) → momentum-contrastive
//! pre-training ([`contrastive`]) → joint pseudo-label and frame-order
//! fine-tuning ([`supervised`]) → frozen-encoder behaviour cloning on a toy
//! manipulation suite ([`toyenv`], [`imitation`]) → study grids ([`bench`]).
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file name the single-precision instantiations used for
//! training.

pub mod autograd;
pub mod bench;
pub mod canon;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod imitation;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod probe;
pub mod render;
pub mod scalar;
pub mod seed;
pub mod supervised;
pub mod tensor;
pub mod toyenv;

#[cfg(test)]
pub(crate) mod testutil;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type Checkpoint32 = encoder::Checkpoint<f32>;
pub type FrozenEncoder32 = encoder::FrozenEncoder<f32>;
pub type ContrastiveState32 = contrastive::ContrastiveState<f32>;
pub type Policy32 = imitation::Policy<f32>;
