//! Stable sub-seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a purpose
//! string and optional facility id / round, hashed with SHA-256. Adding a
//! facility therefore never perturbs another facility's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Derives a 64-bit sub-seed from `(master, purpose, facility, round)`.
pub fn derive_seed(master: u64, purpose: &str, facility: Option<&str>, round: Option<u64>) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    match facility {
        Some(f) => {
            h.update([1u8]);
            h.update((f.len() as u64).to_le_bytes());
            h.update(f.as_bytes());
        }
        None => h.update([0u8]),
    }
    match round {
        Some(r) => {
            h.update([1u8]);
            h.update(r.to_le_bytes());
        }
        None => h.update([0u8]),
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn derive_rng(master: u64, purpose: &str, facility: Option<&str>, round: Option<u64>) -> Rng {
    rng_from(derive_seed(master, purpose, facility, round))
}
