//! Seeded, splittable random streams.
//!
//! Every consumer asks for a stream by label. The label picks a ChaCha
//! stream id, so draws in one subsystem never shift draws in another and a
//! parameter keeps its initial value when unrelated parameters are added or
//! removed (ablations).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(label.as_bytes()));
        rng
    }

    /// Derived tree whose streams are disjoint from the parent's.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree {
            seed: self.seed ^ fnv1a(label.as_bytes()).rotate_left(17),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
