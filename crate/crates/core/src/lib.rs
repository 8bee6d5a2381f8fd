//! Language-model decoding steered by a committee of learned scorers.
//!
//! A recurrent language model proposes continuations; repetition, entailment,
//! relevance and style scorers rerank them inside a sampled beam search, with
//! mixture weights fitted online against gold continuations.

pub mod corpus;
pub mod decoder;
pub mod desk;
pub mod discriminators;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
