//! Reference revision toolkit for noisy summarization corpora.
//!
//! The pipeline aligns reference sentences to source evidence, labels them
//! supported or unsupported, corrupts supported sentences into synthetic
//! hallucinations, assembles contrastive revision training records with
//! intensity codes, re-scores over-generated revision candidates and
//! reports faithfulness metrics. Neural training and generation live
//! outside this crate; it produces and consumes their data.

pub mod aligner;
pub mod contrast;
pub mod corpus;
pub mod corrupt;
pub mod embed;
pub mod error;
pub mod gate;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod prepared;
pub mod rescore;

pub use error::{Error, Result};
