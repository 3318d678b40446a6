//! Cross-modal dense retrieval and retrieval-augmented classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors with tape-based reverse-mode gradients.
//! - [`features`]: pluggable feature extractors and the `XFEA` feature file.
//! - [`alignment`]: the dual encoder mapping images and captions into one space.
//! - [`training`]: hard-negative hinge loss and the Adam training loop.
//! - [`index`]: flat and HNSW inner-product indices with persistence.
//! - [`retriever`]: knowledge sources, retrieval sets and hot-swapping.
//! - [`reader`]: input augmentation and a toy multi-modal classifier.
//! - [`evalkit`]: Recall@K evaluation and k-sweep drivers.
//! - [`synthdata`]: deterministic synthetic scenes, captions and questions.

pub mod alignment;
pub mod autodiff;
mod codec;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod index;
pub mod nn;
pub mod reader;
pub mod retriever;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
