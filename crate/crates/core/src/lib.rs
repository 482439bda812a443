//! SegGuidedNet: a 3D residual encoder-decoder for multi-parametric MRI
//! brain-tumour segmentation with a supervised per-sub-region attention
//! branch, plus the training, evaluation, and reporting pipeline around it.

pub mod domain;
pub mod error;
pub mod losses;
pub mod network;
pub mod nn;

pub use error::{Error, Result};
