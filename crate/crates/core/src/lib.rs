//! Paired pretraining of clinical time-series and clinical-note encoders.
//!
//! Two transformer encoders map a measurement window and a note into a shared
//! embedding space. Pretraining combines a bidirectional contrastive objective
//! (negatives drawn only from other ICU stays) with masked reconstruction of
//! note tokens and measurement rows. The evaluation suite covers cross-modal
//! retrieval, zero-shot mortality scoring, linear probing and fine-tuning on
//! label fractions.

pub mod error;
pub mod seed;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod masking;
pub mod objective;
pub mod substrate;
pub mod train;

pub use error::{Error, Result};
