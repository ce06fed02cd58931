//! Seeded random streams.
//!
//! Every stochastic operation takes its generator explicitly. ChaCha is used
//! because its output is stable across platforms and crate releases, which the
//! run manifests depend on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `stream` of the generator for `seed`.
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed resolution order used by the command-line tools: explicit value,
/// then `DR2_SEED`, then zero.
pub fn resolve_seed(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| std::env::var("DR2_SEED").ok().and_then(|s| s.trim().parse().ok()))
        .unwrap_or(0)
}
