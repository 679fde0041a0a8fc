//! Desk-scale mixture-of-experts upcycling.
//!
//! The crate trains small dense byte-level transformers on synthetic domains,
//! merges them into a sparse mixture-of-experts whose router projects frozen
//! per-domain embeddings into per-layer expert embeddings, and measures how
//! routing specializes. Everything runs on CPU, deterministically per seed,
//! in `f32` for speed or `f64` for gradient checking.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod error;
pub mod model;
pub mod moe;
pub mod gradcheck;
pub mod train;
pub mod upcycle;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{top_k, Scalar, Tape, Tensor, TopK, ValueId};
