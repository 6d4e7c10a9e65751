//! Labeled, splittable seed streams.
//!
//! Every stochastic call site receives its own [`SeedStream`], derived from the
//! run's root seed by a path of labels. Derivation is a pure function of
//! `(root, labels)`, so adding a new consumer never shifts the numbers another
//! consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed),
        }
    }

    /// Child stream for a named consumer.
    pub fn split(&self, label: &str) -> Self {
        Self {
            state: splitmix64(self.state ^ fnv1a(label.as_bytes())),
        }
    }

    /// Child stream for an indexed consumer (task, epoch, class, ...).
    pub fn split_index(&self, label: &str, index: u64) -> Self {
        let s = self.split(label);
        Self {
            state: splitmix64(s.state ^ splitmix64(index)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.state
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}
