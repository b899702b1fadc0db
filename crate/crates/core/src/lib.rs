//! Desk-scale laboratory for comparing two screening pipelines on
//! procedurally generated 3D volumes.
//!
//! The *pre-hoc* pipeline first localizes suspicious regions with a
//! Q-learning agent steering a bounding volume, then classifies each
//! detected patch. The *post-hoc* pipeline first diagnoses the whole
//! volume with a meta-learned classifier, then localizes lesions with a
//! one-class saliency decoder. Both run end-to-end on synthetic phantoms
//! and are scored with the same detection and classification metrics.
//!
//! The numeric core ([`tensor`], [`nn`]) is generic over the scalar type
//! (`f32` for training, `f64` for finite-difference verification);
//! concrete aliases are exported at the crate root.

pub mod config;
pub mod detect;
pub mod dqn;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod prehoc;
pub mod saliency;
pub mod scalar;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by all training pipelines.
pub type TrainScalar = f32;
/// Array type used by all training pipelines.
pub type TrainArray = tensor::Array<f32>;
/// Parameter container used by all training pipelines.
pub type TrainParams = nn::ParameterSet<f32>;
/// Stateful network bundle used by all training pipelines.
pub type TrainNetwork = nn::Network<f32>;
