//! Deterministic seed streams.
//!
//! Every random quantity in a run is drawn from a generator seeded by
//! `derive_seed(master, label, index)`, so parallel trials never share a
//! stream and re-running with the same master seed is bitwise reproducible.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}
