//! Seed derivation.
//!
//! Every random quantity is drawn from a named stream derived from a root seed:
//! the 32-byte ChaCha key is `SHA-256(root_le || 0x00 || purpose)`; indexed
//! sub-streams (per-sample sampler streams, per-grid-point diagnostic streams)
//! append `0x00 || index_le`. Adding a new consumer never shifts the draws of
//! an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Stream = ChaCha12Rng;

fn key(root: u64, purpose: &str, index: Option<u64>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0u8]);
    h.update(purpose.as_bytes());
    if let Some(i) = index {
        h.update([0u8]);
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

/// Stream for `(root, purpose)`.
pub fn stream(root: u64, purpose: &str) -> Stream {
    Stream::from_seed(key(root, purpose, None))
}

/// Stream for `(root, purpose, index)`.
pub fn indexed_stream(root: u64, purpose: &str, index: u64) -> Stream {
    Stream::from_seed(key(root, purpose, Some(index)))
}

/// 64-bit seed for `(root, purpose)`; used when a sub-component takes a plain seed.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let k = key(root, purpose, None);
    u64::from_le_bytes(k[..8].try_into().unwrap())
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "train").random();
        let b: u64 = stream(7, "train").random();
        let c: u64 = stream(7, "diagnose").random();
        let d: u64 = indexed_stream(7, "train", 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
