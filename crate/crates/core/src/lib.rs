//! Multi-modal self-supervised patient embeddings.
//!
//! Triplets of (fundus image, transformed fundus image, second-modality image)
//! are embedded by a small feed-forward encoder and trained with a
//! patient-level softmax embedding loss; representations are evaluated with
//! frozen-feature nearest neighbours and a linear probe.

mod binio;
pub mod data;
pub mod encoder;
pub mod error;
pub mod config;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
