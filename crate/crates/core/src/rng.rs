//! Seeded, index-addressable random substreams.
//!
//! Every consumer derives its generator from `(seed, a, b)` so work can be
//! split across threads or resumed mid-run without changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep unrelated consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Viewer = 1,
    Recording = 2,
    Shuffle = 3,
    Batch = 4,
    Slot = 5,
    Init = 6,
    Folds = 7,
}

pub fn substream(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
