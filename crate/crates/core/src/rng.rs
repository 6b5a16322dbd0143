//! Keyed random streams. Every stream is a ChaCha8 generator seeded with the
//! SHA-256 of the experiment seed and a list of string keys, so a stream for
//! one `(frame, round)` never shifts when another stream draws more values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream_seed(seed: u64, keys: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for key in keys {
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key.as_bytes());
    }
    hasher.finalize().into()
}

pub fn stream(seed: u64, keys: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(seed, keys))
}
