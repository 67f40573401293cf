//! Dual adversarial autoencoder for unsupervised image-to-image translation
//! between two unpaired corpora, plus everything needed to measure it: a
//! procedural two-style sprite dataset with ground-truth attributes, probe
//! classifiers, and an ablation harness.

pub mod error;
pub mod evalkit;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod domains;
pub mod objectives;
pub mod pngio;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Result, XganError};
