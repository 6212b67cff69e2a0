//! Seed derivation for reproducible, thread-count independent streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by
//! `(seed, purpose, index)`. The purpose tag is mixed into the seed with
//! SplitMix64, and the index selects the ChaCha stream, so replicate `i`
//! always sees the same numbers no matter which worker runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent uses of one master seed from overlapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Generator,
    Sampling,
    GammaReplicate,
    RiskReplicate,
    CoverageReplicate,
    BandSimulation,
    OracleDraws,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Generator => 0x6765_6e65_7261_7465,
            Purpose::Sampling => 0x7361_6d70_6c69_6e67,
            Purpose::GammaReplicate => 0x6761_6d6d_615f_656d,
            Purpose::RiskReplicate => 0x7269_736b_5f72_6570,
            Purpose::CoverageReplicate => 0x636f_7665_7261_6765,
            Purpose::BandSimulation => 0x6261_6e64_5f73_696d,
            Purpose::OracleDraws => 0x6f72_6163_6c65_5f64,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed, e.g. the band-simulation seed of one replicate.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ purpose.tag()).wrapping_add(index))
}

/// The stream for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ purpose.tag()));
    rng.set_stream(index);
    rng
}
