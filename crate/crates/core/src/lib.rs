//! Object hallucination analysis for image captioning.
//!
//! Captions are resolved to MSCOCO objects through a synonym table and checked
//! against per-image ground truth built from segmentation labels and reference
//! captions.

pub mod annotations;
pub mod chair;
pub mod cli;
pub mod consistency;
pub mod error;
pub mod lexicon;
pub mod metrics;
pub mod report;
pub mod restrict;
mod tsv;

pub use error::{Error, Result};
