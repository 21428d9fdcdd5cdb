//! Query-based adaptive aggregation for visual place recognition.
//!
//! Learned query banks attend over a backbone feature map, and the image
//! descriptor is the normalized similarity between the image's query-level
//! features and a reference codebook. The crate also holds the score
//! normalization variants, coding-rate analysis, a synthetic multi-domain
//! world, multi-similarity training and recall evaluation.

pub mod attn_kernels;
pub mod coding_rate;
pub mod error;
pub mod paradigms;
pub mod pipeline;
pub mod qaa_agg;
pub mod retrieval_eval;
pub mod synth_data;
pub mod trainer;

pub use error::{Error, Result};
