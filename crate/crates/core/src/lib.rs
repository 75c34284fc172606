//! Laboratory for inverting a language model's last-token hidden state
//! back into the text that produced it.
//!
//! An adapter projects the representation `h` taken after block `l` of a
//! target model into `k` token embeddings of a decoding model. The decoder
//! reads `[X_e; X_sys; X_u]` through its embedding bypass and generates
//! the reconstruction greedily.

pub mod adapter;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod judge;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
