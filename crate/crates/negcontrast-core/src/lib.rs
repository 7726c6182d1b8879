//! Negation-aware contrastive learning laboratory.
//!
//! A self-contained dual-encoder playground built around a synthetic
//! image-caption world: symbolic scenes stand in for images, a closed
//! grammar generates captions, and a negation rewriter produces hard
//! distractor captions. On top of that sit the contrastive loss terms
//! with analytic gradients, a fine-tuning loop with a frozen image
//! side, a distractor-image miner, and an evaluation harness for
//! negation matching accuracy, the prompt-negation delta, and
//! hard-negative folds.

pub mod caption;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod loss;
pub mod miner;
pub mod scene;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Hex-encoded SHA-256 of a byte slice, used to stamp artifacts with
/// the configuration that produced them.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
