//! Pseudo-triplet construction and pseudo-composed mapping training for
//! zero-shot composed image retrieval.
//!
//! The pipeline:
//!
//! 1. [`synth`] (or an external exporter via [`store`]) provides image, crop and
//!    caption embeddings.
//! 2. [`ptc`] turns batches of image–caption pairs into pseudo triplets.
//! 3. [`pcm`] maps reference embeddings to pseudo-word tokens and scores them
//!    with the compose and alignment objectives through the frozen
//!    [`encoders`].
//! 4. [`trainer`] optimizes the mapping network with AdamW.
//! 5. [`eval`] composes template queries and reports Recall@K.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod linalg;
pub mod pcm;
pub mod ptc;
pub mod rng;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use store::Embedding;
