//! Semi-supervised sequence transduction lab for compositional generalization.
//!
//! The crate trains small 2-layer GRU encoder-decoder models with attention on
//! SCAN-style command-to-action tasks and studies how monolingual data helps
//! them generalize: supervised baselines, classic back-translation, its
//! on-the-fly variant, iterative back-translation, and curriculum iterative
//! back-translation, together with the pseudo-parallel quality metrics used to
//! analyze them.

pub mod curriculum;
pub mod data;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod seq2seq;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngState;
