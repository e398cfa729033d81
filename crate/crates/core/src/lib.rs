//! Functional time embeddings and a continuous-time self-attention predictor.

pub mod autodiff;
pub mod data_synth;
pub mod error;

pub use error::{Error, Result};
pub mod embedding;
pub mod experiments;
pub mod kernel_lab;
pub mod params;
pub mod rng;
pub mod sequence_model;
pub mod training;
