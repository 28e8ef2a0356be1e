//! Stable seed derivation.
//!
//! Every random stream in the pipeline is derived from one root seed by
//! hashing a path of labels, so that independent components (cells, devices,
//! grid points) never share or perturb each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream type used throughout the crate.
pub type SeedStream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes. Stable across platforms and releases.
pub fn hash_label(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A position in the seed derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(u64);

impl Seed {
    pub fn new(root: u64) -> Self {
        Seed(root)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn child(self, index: u64) -> Self {
        Seed(splitmix64(self.0 ^ splitmix64(index)))
    }

    pub fn child_label(self, label: &str) -> Self {
        self.child(hash_label(label))
    }

    pub fn rng(self) -> SeedStream {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
