//! Few-shot cross-modal matching of spoken digits to digit images through
//! multimodal embeddings trained on mined pairs.

pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod features;
pub mod fewshot;
pub mod mining;
pub mod models;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
