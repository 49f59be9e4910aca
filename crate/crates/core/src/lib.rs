//! Semantic discrete encoding image tokenizer and a unified autoregressive
//! vision-language model over its codes.
//!
//! Numeric code is generic over [`scalar::Scalar`] (f32 or f64); the aliases
//! below pick f32 for training and f64 for gradient checks.

pub mod adversarial;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod semantic;
pub mod tensor;
pub mod tokenizer;
pub mod vq;

pub use error::{Result, SdeError};

pub type Image = data::ImageTensor<f32>;
pub type Image64 = data::ImageTensor<f64>;
pub type Codebook = vq::Codebook<f32>;
pub type Codebook64 = vq::Codebook<f64>;
pub type FeatureGrid = vq::FeatureGrid<f32>;
pub type FeatureGrid64 = vq::FeatureGrid<f64>;
pub type Model = tokenizer::SdeModel<f32>;
pub type Model64 = tokenizer::SdeModel<f64>;
pub type TokenizerTrainer = tokenizer::Trainer<f32>;
pub type ArModel = lm::ArModel<f32>;
pub type ArModel64 = lm::ArModel<f64>;
pub type LmTrainer = lm::LmTrainer<f32>;
pub type Provider = semantic::Provider<f32>;
pub type Target = semantic::SemanticTarget<f32>;
