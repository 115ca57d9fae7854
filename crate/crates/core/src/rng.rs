//! Named, splittable seeding.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! root seed plus a label path (`"init"`, `"noise"`, `"data"`, ...) and an
//! optional counter, so components never share a stream and any stream can be
//! recreated from its coordinates alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            key: splitmix64(seed),
        }
    }

    pub fn split(&self, label: &str) -> Self {
        let mut key = self.key;
        for b in label.bytes() {
            key = splitmix64(key ^ u64::from(b));
        }
        SeedStream {
            key: splitmix64(key ^ 0xFF),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        SeedStream {
            key: splitmix64(self.key ^ splitmix64(i.wrapping_add(1))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
