//! Weakly supervised object detection with depth priors: a two-stream MIL
//! detector, a Siamese contrastive objective, caption-conditioned depth
//! priors, depth-filtered pseudo-box mining and refinement, and a
//! COCO/VOC-style evaluator.
//!
//! Numeric code is generic over [`numkit::Scalar`]; the aliases below pin
//! the common `f64`/`f32` instantiations.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod evald;
pub mod fusion;
pub mod milhead;
pub mod model;
pub mod numkit;
pub mod pipeline;
pub mod priors;
pub mod refine;

pub use error::{Error, Result};

pub type Matrix64 = numkit::Matrix<f64>;
pub type Matrix32 = numkit::Matrix<f32>;
pub type Model = model::ModelParams<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type HeadParams64 = milhead::HeadParams<f64>;
pub type ScorePack64 = milhead::ScorePack<f64>;
pub type PseudoBoxes = refine::PseudoBoxSet<f64>;
