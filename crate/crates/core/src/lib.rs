//! Vision-language risk modeling for pulmonary nodules.
//!
//! The pipeline aligns nine-plane 2.5D CT views of a nodule with report-like
//! text rendered from structured semantic features, using a dual-encoder
//! transformer with low-rank adapters, attention-based multiple-instance
//! pooling and two supervised risk branches. Downstream modules calibrate and
//! ensemble fold models, run zero-shot semantic queries and compute screening
//! metrics.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod evaluate;
pub mod objective;
pub mod calibrate;
pub mod data_ingest;
pub mod semantics;
pub mod nifti;
pub mod preprocess;
pub mod model;
pub mod synth;
pub mod train;
pub mod infer;
