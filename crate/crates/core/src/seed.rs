//! Deterministic seed derivation.
//!
//! Every random draw in a run is keyed by `(base_seed, context)` where the
//! context is an ordered list of labelled integers, e.g.
//! `[("prompt", id), ("step", 3), ("sample", 1)]`. The derived value is the
//! first eight bytes of a SHA-256 digest over an unambiguous encoding of the
//! inputs, so it is identical on every platform.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DOMAIN: &[u8] = b"t2i-audit/seed/v1";

pub fn derive_seed(base_seed: u64, context: &[(&str, u64)]) -> Result<u64> {
    if context.is_empty() {
        return Err(Error::Invalid("seed context must not be empty".into()));
    }
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(base_seed.to_le_bytes());
    for (label, value) in context {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(value.to_le_bytes());
    }
    Ok(first_u64(&h.finalize()))
}

/// Stable 64-bit key for a string (prompt ids, token text) usable in a seed context.
pub fn text_key(text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"t2i-audit/text/v1");
    h.update(text.as_bytes());
    first_u64(&h.finalize())
}

fn first_u64(digest: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}
