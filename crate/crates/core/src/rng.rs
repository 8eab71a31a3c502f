//! Seeded random streams.
//!
//! Every random draw comes from a ChaCha8 generator keyed by a member seed.
//! The stream id packs the purpose into the top byte and the layer index into
//! the low bits, so any single matrix can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Weights = 1,
    Biases = 2,
    Inputs = 3,
    Teacher = 4,
    MonteCarlo = 5,
    Probe = 6,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Seed of ensemble member `member` under `master` (splitmix64 finalizer).
pub fn member_seed(master: u64, member: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(member.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the teacher network paired with a student seed.
pub fn teacher_seed(seed: u64) -> u64 {
    member_seed(seed ^ ((Purpose::Teacher as u64) << 56), 0)
}
