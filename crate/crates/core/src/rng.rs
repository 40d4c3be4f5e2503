//! Named random substreams derived from one master seed.
//!
//! Every random draw in a run comes from `substream(master, purpose, owner)`,
//! so adding a consumer never perturbs another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn substream_seed(master: u64, purpose: &str, owner: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(owner.as_bytes());
    hasher.finalize().into()
}

pub fn substream(master: u64, purpose: &str, owner: &str) -> Rng {
    Rng::from_seed(substream_seed(master, purpose, owner))
}

/// A 64-bit seed for a nested consumer, e.g. a bootstrap or a site RNG.
pub fn derive_seed(master: u64, purpose: &str, owner: &str) -> u64 {
    let bytes = substream_seed(master, purpose, owner);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// The `index`-th independent stream of a seeded generator.
pub fn indexed_stream(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
