//! End-to-end audio-visual speech recognition.
//!
//! Two model families share one feature pipeline: a frame-synchronous CTC
//! acoustic model adapted by summing an MLP-transformed visual vector into
//! its inputs, and an attention encoder-decoder adapted by concatenating the
//! visual vector to every frame.

pub mod adaptation;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod hypothesis;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod s2s;
pub mod training;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
pub use hypothesis::Hypothesis;
