//! Contrastive pretraining with a consistency regularizer.
//!
//! A query encoder is trained with InfoNCE against a queue of negative keys
//! produced by a momentum (EMA) key encoder. On top of instance
//! discrimination, the softmax similarity distribution of the query over the
//! queue is pulled towards the distribution of its positive key with a
//! symmetric KL term. The crate also carries the toy-scale data pipeline and
//! the downstream probe and fine-tuning protocols used to evaluate runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

mod binio;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod numeric;
pub mod rng;
pub mod trainer;

pub use embeddings::Embeddings;
pub use error::{Co2Error, Result};
