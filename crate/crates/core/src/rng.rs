//! Portable per-pair random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream for one pair: ChaCha8 keyed by SHA-256 over the seed, a domain
/// label and the pair id, so pairs and stages draw independent sequences.
pub fn pair_rng(seed: u64, domain: &str, pair_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(pair_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
