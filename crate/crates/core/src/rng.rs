//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 seeded with
//! `SeedableRng::seed_from_u64`. Fair coin flips are read LSB-first from
//! successive `next_u64` outputs, so a given seed produces the same bits on
//! every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct BitStream {
    rng: ChaCha8Rng,
    word: u64,
    remaining: u32,
}

impl BitStream {
    pub fn new(seed: u64) -> Self {
        BitStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            word: 0,
            remaining: 0,
        }
    }

    pub fn next_bit(&mut self) -> bool {
        if self.remaining == 0 {
            self.word = self.rng.next_u64();
            self.remaining = 64;
        }
        let bit = self.word & 1 == 1;
        self.word >>= 1;
        self.remaining -= 1;
        bit
    }
}

/// Deterministic seed generator for components that need their own stream.
pub struct SeedRng(ChaCha8Rng);

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..n` (n > 0), rejection sampled.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.0.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform real in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// SplitMix64 finalizer; used to derive sub-seeds from `(seed, tag)` pairs.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a string label (e.g. a record id), stable across runs.
pub fn mix_str(seed: u64, label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(seed, h)
}
