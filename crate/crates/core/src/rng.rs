//! Seed derivation for independent, scheduling-proof random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed. Order matters.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(parts))
}

/// Domain tags keeping streams used for different purposes apart.
pub mod tag {
    pub const SYNTH_TRAIN: u64 = 0x0074_7261_696e;
    pub const SYNTH_TEST: u64 = 0x7465_7374;
    pub const SYNTH_PICK: u64 = 0x7069_636b;
    pub const LOCAL_TRAIN: u64 = 0x006c_6f63_616c;
    pub const SPLIT: u64 = 0x0073_706c_6974;
    pub const GMM: u64 = 0x0067_6d6d;
    pub const INIT: u64 = 0x696e_6974;
}
