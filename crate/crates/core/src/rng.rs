//! Deterministic random streams keyed by `(seed, role, indices)`.
//!
//! Every stochastic quantity in the toolkit is drawn from a stream whose key
//! is built by folding a role string and a sequence of integer indices into a
//! 64-bit state with a splitmix-style mixer. Draws are therefore a pure
//! function of the key: independent of evaluation order, thread scheduling,
//! and platform. One-shot draws ([`Key::unit`], [`Key::pick`]) are stateless;
//! sequential consumers get a ChaCha12 stream seeded from the key
//! ([`Key::rng`]).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

#[inline]
fn combine(h: u64, v: u64) -> u64 {
    mix64(h.rotate_left(17) ^ v.wrapping_mul(GOLDEN))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A stream key. Cheap to copy; extend with [`Key::with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Key(u64);

impl Key {
    pub fn new(seed: u64, role: &str) -> Self {
        Key(combine(fnv1a(role.as_bytes()), seed))
    }

    /// Derives a sub-key for index `v`.
    #[inline]
    pub fn with(self, v: u64) -> Self {
        Key(combine(self.0, v))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// One-shot uniform draw in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn unit(self) -> f64 {
        (mix64(self.0 ^ GOLDEN) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One-shot uniform index in `0..n` (Lemire reduction; `n` must be > 0).
    #[inline]
    pub fn pick(self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((mix64(self.0 ^ GOLDEN) as u128 * n as u128) >> 64) as usize
    }

    /// Sequential stream for consumers that need many draws.
    pub fn rng(self) -> ChaCha12Rng {
        let mut seed = [0u8; 32];
        for i in 0..4 {
            let w = mix64(self.0.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN)));
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}
