//! Masked shape prediction: self-supervised pre-training for 3D point clouds.

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod masking;
pub mod neural;
pub mod oracle;
pub mod pipeline;
pub mod probes;
pub mod rng;
pub mod scene;
pub mod selfcheck;
pub mod shape_context;
pub mod spatial;
pub mod tensor;

pub use error::{MspError, Result};
