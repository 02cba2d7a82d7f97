//! Three-pass spoken language understanding: an ASR subnetwork transcribes
//! speech features, an LM subnetwork predicts an initial entity label
//! sequence from the transcript, and a deliberation subnetwork conditions on
//! both to emit the final labels.

pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub mod vocab;
pub mod asr;
pub mod lm;
pub mod deliberation;
pub mod decoding;
pub mod metrics;
pub mod synth;
pub mod training;
pub mod oracle;
pub mod experiment;
pub mod gradsuite;
