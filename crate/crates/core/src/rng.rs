//! Deterministic randomness: one root seed, split per consumer.
//!
//! Every random draw in the crate flows from a caller-supplied 64-bit seed
//! through [`split_seed`], so parallel evaluation and re-runs are
//! reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent child seed from a root seed and a stream index.
///
/// Uses the splitmix64 finalizer, which is stable across platforms and
/// avoids the process-randomized state of the standard hasher.
pub fn split_seed(root: u64, index: u64) -> u64 {
    let mut z = root
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded stream cipher RNG used throughout the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`, the initialization
/// used for every learned tensor in untrained runs.
pub fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f32> {
    use rand::Rng;
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| (rng.random_range(-bound..=bound)) as f32)
        .collect()
}

/// Standard normal draw (Box-Muller).
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
