//! Order-independent seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of labels hashed with
//! SHA-256, so a stream never depends on how many other streams were drawn
//! before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a seed key.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Str(&'a str),
    U64(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Str(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::U64(v)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(v: usize) -> Self {
        SeedPart::U64(v as u64)
    }
}

pub fn seed_bytes(parts: &[SeedPart<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        match part {
            SeedPart::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            SeedPart::U64(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().into()
}

pub fn derive_rng(parts: &[SeedPart<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(seed_bytes(parts))
}

pub fn derive_u64(parts: &[SeedPart<'_>]) -> u64 {
    let bytes = seed_bytes(parts);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

#[macro_export]
#[doc(hidden)]
macro_rules! seed_key {
    ($($part:expr),* $(,)?) => {
        [$($crate::seeding::SeedPart::from($part)),*]
    };
}
