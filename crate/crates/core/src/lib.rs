//! Phoneme decoding from MEG windows: dataset handling, grouping and
//! balancing, augmentation, classifiers, training and saliency analysis.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod inventory;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod saliency;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
