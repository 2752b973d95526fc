//! Simultaneous speech reconstruction at desk scale.
//!
//! A streaming transducer recognizer feeds a frame-level adaptor, whose
//! output drives a decoder-only codebook model under a wait-k visibility
//! policy. Codes are turned back into features chunk by chunk.

pub mod adaptor;
pub mod config;
pub mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quantizer;
pub mod training;
pub mod transducer;
pub mod waitk;

pub use config::RunConfig;
pub use error::{Error, Result};
