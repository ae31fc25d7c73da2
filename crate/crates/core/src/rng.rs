//! Named, independent random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Deterministic stream for `(seed, name)`. Different names give unrelated streams.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stream names used by the experiment runner.
pub mod streams {
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const EXEMPLAR: &str = "exemplar";
    pub const CB: &str = "cb";
    pub const ORDER: &str = "order";
    pub const SYNTHETIC: &str = "synthetic";
}
