//! Few-shot speaker identification: spectrogram front end, embedding
//! backbones, capsule routing, prototypical episodes and the experiment
//! harness around them.

pub mod audio;
pub mod datasets;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod harness;
pub mod models;
pub mod nn;

pub use error::{Error, Result};
