//! Measure how fingerprintable individual websites are under website
//! fingerprinting attacks.
//!
//! The pipeline: load and sanitize packet traces ([`trace_store`]), extract
//! the CUMUL, Wang-kNN and k-FP feature sets ([`netfeat`]), run the three
//! classifiers ([`attacks`]) under stratified cross-validation and combine
//! them ([`evaluation`]), then analyze the features ([`variance`]), the
//! confusions ([`congraph`]) and the sites' web-design properties
//! ([`sitefeat`]). [`synthgen`] produces deterministic synthetic worlds for
//! every stage.

pub mod attacks;
pub mod congraph;
pub mod evaluation;
pub mod forest;
pub mod netfeat;
pub mod sitefeat;
pub mod stats;
pub mod synthgen;
pub mod trace_store;
pub mod variance;

use sha2::{Digest, Sha256};

/// Derive an independent seed for a named sub-task.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
