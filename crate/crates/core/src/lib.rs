//! Egocentric action anticipation on frozen video features.
//!
//! The pipeline resolves a pre-action observation window for each annotated
//! segment, fetches backbone tokens for it, trains a grid of attentive-probe
//! heads with sigmoid focal loss, selects the best head per epoch by
//! validation Mean Top-5 Recall, and blends the selected epochs field by field
//! into a challenge submission.

pub mod config;
pub mod container;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod losses;
pub mod pipeline;
pub mod probe;
pub mod scores;
pub mod seed;
pub mod submission;
pub mod synthetic;
pub mod trainer;
pub mod tensor;
pub mod vocab;
pub mod windows;

pub use error::{Error, ErrorKind, Result};
