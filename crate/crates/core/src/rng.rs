//! Seeded PCG32 streams.
//!
//! Each stochastic concern draws from its own PCG stream so that enabling or
//! disabling one feature (say, element dropout) never shifts the random
//! numbers another one (say, the shuffle order) sees.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

/// Purpose tag selecting an independent PCG stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    ModalityDropout = 3,
    ElementDropout = 4,
    Folds = 5,
    Synthetic = 6,
    Encoder = 7,
    Prompts = 8,
    Evaluation = 9,
}

pub fn stream(seed: u64, purpose: Purpose) -> Pcg32 {
    Pcg32::new(seed, purpose as u64)
}

/// Derives a child seed from `(seed, tag)`, e.g. one per fold.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = Pcg32::new(seed ^ 0x9e37_79b9_7f4a_7c15, tag.wrapping_mul(2).wrapping_add(1));
    rng.next_u64()
}

pub fn seeded(seed: u64) -> Pcg32 {
    Pcg32::seed_from_u64(seed)
}
