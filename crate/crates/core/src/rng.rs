//! Named random sub-streams derived from a single seed.
//!
//! Every consumer of randomness asks for its own stream (crop sampling, batch
//! order, reference mixture, init, ...) keyed by a name and an index, so adding
//! draws in one place never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Batch,
    Crop,
    Mixture,
    World,
    Noise,
    Encoder,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x494e_4954,
            Stream::Batch => 0x4241_5443,
            Stream::Crop => 0x4352_4f50,
            Stream::Mixture => 0x4d49_5854,
            Stream::World => 0x574f_524c,
            Stream::Noise => 0x4e4f_4953,
            Stream::Encoder => 0x454e_4344,
            Stream::Eval => 0x4556_414c,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream.tag()) ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
