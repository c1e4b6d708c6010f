//! Extending a pretrained language model to a new domain without forgetting.
//!
//! The crate bundles a small GLU transformer trained from scratch, the
//! extension strategies compared against each other (gated parallel
//! adapters with local losses, vanilla adapters, LoRA, full finetuning),
//! the training loop with mixed-domain batches, held-out perplexity and a
//! singular-value diagnostic of the gating matrices.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f32` instantiation used for training.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extension;
pub mod losses;
pub mod params;
pub mod report;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use backbone::{LanguageModel, ModelConfig, TokenBatch};
pub use error::{Error, Result};
pub use extension::{ExtensionConfig, GateKind, InitScheme, Method};
pub use scalar::Scalar;
pub use training::TrainConfig;

pub type Tensor = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f32>;
pub type BackboneModel = backbone::BackboneModel<f32>;
pub type ExtendedModel = extension::ExtendedModel<f32>;
pub type LoadedModel = training::checkpoint::LoadedModel<f32>;
