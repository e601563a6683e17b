//! Incremental word-by-word dialog state tracking on DSTC2.
//!
//! One LSTM classifier per dialog state component consumes a stream of
//! (token, ASR confidence) pairs and emits a belief distribution after
//! every token. The crate covers the whole pipeline: DSTC2 corpus
//! ingestion, preprocessing (value abstraction, OOV noise, transcription
//! mixing), a from-scratch f64 autodiff core, training with ADAM and
//! early stopping, prediction ensembling, the DSTC2 featured metrics, and
//! a streaming CLI.

pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod model;
pub mod nncore;
pub mod preprocess;
pub mod rng;
pub mod train;

pub mod cli;

pub use error::{Error, Result};

/// Hex-encoded SHA-256, used to fingerprint artifacts (vocabularies,
/// checkpoints, configs) so mismatched pieces refuse to combine.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}
