//! Fuzzy fully convolutional segmentation of layered ultrasound-like images,
//! refined by a fully connected CRF with anatomy context labels.
//!
//! Pipeline: [`preprocess`] (histogram equalization + Haar channels) →
//! [`fcn`] (U-Net with trainable [`fuzzy`] layers, trained through
//! [`autodiff`] and [`optim`]) → [`densecrf`] (mean-field refinement) →
//! [`dataset`] metrics.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod densecrf;
pub mod error;
pub mod fcn;
pub mod fuzzy;
mod linalg;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod unary;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tensor};

/// Number of segmentation classes: background, tumor, fat, mammary, muscle.
pub const NUM_CLASSES: usize = 5;
