//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! root seed, a purpose label and an index:
//!
//! ```text
//! seed = splitmix64(root ^ fnv1a64(purpose) ^ splitmix64(index))
//! ```
//!
//! Purpose labels name the consumer (`"augment"`, `"sca.step"`, ...). Two
//! streams differing in any component are unrelated, so work can be split
//! across samples or candidates without the result depending on order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3))
}

pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(root ^ fnv1a64(purpose) ^ splitmix64(index))
}

pub fn stream(root: u64, purpose: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}

/// Stream for a two-level index such as (iteration, candidate).
pub fn stream2(root: u64, purpose: &str, outer: u64, inner: u64) -> Rng {
    stream(derive_seed(root, purpose, outer), purpose, inner)
}
