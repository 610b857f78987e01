//! Deterministic, counter-style random stream derivation.
//!
//! Every stochastic unit of work (a simulated subject, a Monte Carlo null
//! draw, an experiment replicate) draws from its own generator seeded by a
//! hash of `(master seed, index, tag)`. Results are therefore identical no
//! matter how the units are scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same master seed independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Subject,
    NullDraw,
    Replicate,
    Bootstrap,
    ChiSqMixture,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Subject => 0x5342_4a43,      // "SBJC"
            StreamKind::NullDraw => 0x4e44_5257,     // "NDRW"
            StreamKind::Replicate => 0x5245_504c,    // "REPL"
            StreamKind::Bootstrap => 0x424f_4f54,    // "BOOT"
            StreamKind::ChiSqMixture => 0x434d_4958, // "CMIX"
        }
    }
}

/// SplitMix64 step; a solid 64-bit mixer for seed derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, kind, index, sub)`.
pub fn derive_seed(seed: u64, kind: StreamKind, index: u64, sub: u64) -> u64 {
    let mut state = seed ^ kind.tag().rotate_left(32);
    let a = splitmix64(&mut state);
    state ^= index.wrapping_mul(0xd6e8_feb8_6659_fd93);
    let b = splitmix64(&mut state);
    state ^= sub.wrapping_mul(0xa076_1d64_78bd_642f);
    let c = splitmix64(&mut state);
    a ^ b.rotate_left(17) ^ c.rotate_left(43)
}

/// Generator for one unit of work.
pub fn stream(seed: u64, kind: StreamKind, index: u64, sub: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, kind, index, sub))
}
