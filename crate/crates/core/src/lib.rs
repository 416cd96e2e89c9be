//! Universal multi-modal embeddings from a text encoder that reads image
//! patches as tokens.
//!
//! A ViT turns an image into visual token states that the text encoder
//! consumes exactly like word embeddings, so text, images and composed
//! image-text inputs all land in one embedding space. The crate also holds
//! the two-stage contrastive trainer, procedural data generators, fusion
//! baselines and an exact-search evaluation harness.

pub mod backprop;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod forge;
pub mod fusion;
pub mod image;
pub mod loss;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

#[cfg(test)]
mod testutil;

pub use config::{ModelConfig, TokenOrder};
pub use error::{Error, Result};
pub use image::ImageGrid;
pub use model::{Embedding, Model, VisualTokenStates};
pub use params::{Gradients, ModelParams, Partition};
pub use tokenizer::{TokenSequence, Vocab};
