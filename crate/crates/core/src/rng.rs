//! Seed derivation: every random stream is split off one root seed by purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purposes for which a run draws randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Subset,
    KMeans,
    Generate,
    Review,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x696e_6974,
            Stream::Shuffle => 0x7368_7566,
            Stream::Subset => 0x7375_6273,
            Stream::KMeans => 0x6b6d_6e73,
            Stream::Generate => 0x6765_6e72,
            Stream::Review => 0x7276_6577,
        }
    }
}

/// splitmix64 finalizer.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(root ^ stream.tag()).wrapping_add(index))
}

pub fn stream(root: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, stream, index))
}
