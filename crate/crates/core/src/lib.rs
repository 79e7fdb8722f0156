//! Source-free self-training adaptation for attention encoder-decoder
//! recognizers, at desk scale.

pub mod adaptation;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod indicators;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod uttfilter;

pub use error::{Error, Result};
