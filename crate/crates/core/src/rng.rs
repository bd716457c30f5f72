//! Named, hierarchical random streams.
//!
//! Every random draw in the crate comes from a stream keyed by the run seed
//! and a path of labels (component, prompt, iteration, ...). Two streams with
//! the same key produce the same values no matter which thread asks first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a component name.
pub fn label(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Key derived from a seed and a label path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed))
    }

    pub fn child(self, part: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(part.wrapping_add(0x632B_E59B_D9B4_E019))))
    }

    pub fn named(self, name: &str) -> Self {
        self.child(label(name))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn stream(self) -> Stream {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Stream for `(seed, component, indices...)`.
pub fn stream(seed: u64, component: &str, indices: &[u64]) -> Stream {
    indices
        .iter()
        .fold(StreamKey::root(seed).named(component), |k, &i| k.child(i))
        .stream()
}

/// Deterministic uniform in `[-1, 1)` from a key; used for hashed features.
pub fn hashed_unit(key: u64) -> f64 {
    let bits = splitmix64(key) >> 11;
    (bits as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
}
