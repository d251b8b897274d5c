//! Multi-label recognition with jointly trained prompt contexts and a
//! prototype adapter, trained on text captions and synthetic images.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! training and evaluation paths use.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod seed;
pub mod training;
mod wire;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type FeatureSet = encoders::FeatureSet<f64>;
pub type TextEncoder = encoders::TextEncoder<f64>;
pub type ClassDirections = encoders::ClassDirections<f64>;
pub type PromptBank = model::PromptBank<f64>;
pub type PrototypeMatrix = model::PrototypeMatrix<f64>;
pub type SimilarityBundle = model::SimilarityBundle<f64>;
pub type Params = training::Params<f64>;
pub type Checkpoint = training::Checkpoint<f64>;
