//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness (`"split"`, `"init"`, `"shuffle"`,
//! `"jitter"`, ...) gets its own generator so that changing how much one of
//! them draws does not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the substream `name` of `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(substream_seed(root, name))
}
