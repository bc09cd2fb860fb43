//! Seeded randomness. All stochastic behaviour flows through [`Rng`] values
//! created here so runs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed` for a named purpose.
pub fn derived(seed: u64, purpose: &str, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed ^ fnv1a(purpose.as_bytes()));
    rng.set_stream(index);
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
