//! Counter-based random streams.
//!
//! Every random object in the crate is drawn from an [`RngStream`] keyed by
//! `(seed, stream id)`. Prompt `i` of a batch always uses stream `i`, so the
//! batch contents do not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derived stream for a sub-purpose, e.g. `stream.child(7)`.
    ///
    /// The child id is mixed into the seed so children of distinct parents
    /// never collide with each other's stream ids.
    pub fn child(&self, tag: u64) -> Self {
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self {
            seed: mixed,
            stream: tag,
        }
    }

    pub fn generator(&self) -> StreamRng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        StreamRng { rng }
    }
}

/// Independent seed for a named purpose within one experiment seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag ^ 0xd1b5_4a32_d192_ed03))
}

pub struct StreamRng {
    rng: ChaCha20Rng,
}

impl StreamRng {
    pub fn normal<T: Scalar>(&mut self) -> T {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        T::lit(z)
    }

    pub fn normals<T: Scalar>(&mut self, k: usize) -> Vec<T> {
        (0..k).map(|_| self.normal()).collect()
    }

    pub fn uniform<T: Scalar>(&mut self) -> T {
        let u: f64 = rand::Rng::random(&mut self.rng);
        T::lit(u)
    }

    pub fn index(&mut self, upper: usize) -> usize {
        rand::Rng::random_range(&mut self.rng, 0..upper)
    }

    pub fn inner(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
