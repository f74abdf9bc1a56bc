//! Few-shot image restoration guided by distortion relations.
//!
//! Auxiliary distortion tasks are synthesized from clean images, a relation
//! network embeds each task and the target into a shared space, and the
//! cosine similarities between embeddings weight each auxiliary task's
//! gradient during pre-training or meta-training.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod image;
pub mod pipeline;
pub mod relation;
pub mod rng;
pub mod scenes;
pub mod synth;
pub mod trainers;

pub use error::{DrtlError, Result};
pub use image::Image;
