//! Guided conditional diffusion for wound-infection classification.
//!
//! A class-conditional denoiser is trained on labelled images. At inference a
//! test image is noised and denoised toward each label, and an embedding
//! network picks the label whose synthesis lies closest to the original.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion_training;
pub mod embedding_classifier;
mod error;
pub mod explain;
pub mod metrics;
pub mod output;
pub mod pipeline;
pub mod rng;
pub mod samplers;
pub mod schedules;

pub use error::{Error, Result};
