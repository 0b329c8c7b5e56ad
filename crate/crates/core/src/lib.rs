//! Contrastive video-text pre-training on pre-extracted feature tokens.
//!
//! Positive pairs are temporally overlapping video and text clips; batches
//! are built from clusters of mutually similar videos retrieved from a dense
//! index of the current model's global video features. After training, the
//! encoders transfer without task training to text-to-video retrieval,
//! multiple-choice QA, action segmentation with an Outside rejection label,
//! and action step localization.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod objective;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};

/// Lowercase hex of `bytes`.
pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of `bytes`, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(bytes))
}
