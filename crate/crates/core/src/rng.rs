//! Seeded randomness.
//!
//! Gaussian tensors come from a counter-based stream so any implementation
//! can regenerate a tensor from `(seed, shape)` alone:
//!
//! 1. The `i`-th 64-bit word of stream `seed` is the SplitMix64 output
//!    `mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)` (wrapping arithmetic), where
//!    `mix64(z) = z ^ (z >> 31)` after
//!    `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB`.
//! 2. A word `w` becomes a uniform `u = (w >> 11) * 2^-53` in `[0, 1)`.
//! 3. Normals are produced in pairs by Box–Muller. Pair `k` uses words `2k`
//!    and `2k + 1`: `u1 = 1 - u(2k)` (in `(0, 1]`), `u2 = u(2k + 1)`,
//!    `r = sqrt(-2 ln u1)`, element `2k` is `r cos(2π u2)` and element `2k + 1`
//!    is `r sin(2π u2)`, computed in `f64` and rounded to `f32`.
//! 4. Elements fill the tensor in C order (channel, row, column).
//!
//! Everything else (permutations, jitter, uniform positions) uses ChaCha8
//! seeded from [`derive_seed`], which is also how sub-streams are split off a
//! user seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Word `counter` of the SplitMix64 stream started at `seed`.
#[inline]
pub fn stream_word(seed: u64, counter: u64) -> u64 {
    mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

#[inline]
fn unit(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal pair `k` of the stream.
#[inline]
pub fn normal_pair(seed: u64, k: u64) -> (f64, f64) {
    let u1 = 1.0 - unit(stream_word(seed, 2 * k));
    let u2 = unit(stream_word(seed, 2 * k + 1));
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Fills `out` with the first `out.len()` normals of stream `seed`.
pub fn fill_standard_normal(seed: u64, out: &mut [f32]) {
    let mut chunks = out.chunks_exact_mut(2);
    let mut k = 0u64;
    for pair in &mut chunks {
        let (a, b) = normal_pair(seed, k);
        pair[0] = a as f32;
        pair[1] = b as f32;
        k += 1;
    }
    if let [last] = chunks.into_remainder() {
        *last = normal_pair(seed, k).0 as f32;
    }
}

/// Splits an independent seed off `seed` for the sub-task `index`.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN_GAMMA).wrapping_add(mix64(index.wrapping_add(GOLDEN_GAMMA))))
}

/// Folds a string label into a seed (FNV-1a, then mixed).
pub fn label_seed(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h)
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
