//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const PARTICIPATION: &str = "participation";
pub const SPLIT: &str = "split";
pub const SYNTHETIC: &str = "synthetic";
pub const HOLDOUT: &str = "holdout";
pub const SIGNATURE: &str = "signature";

/// Seed for the sub-stream `name` of `root`. Streams with different names are
/// independent, so perturbing one component leaves the others untouched.
pub fn substream(root: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(root.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(root, name))
}
