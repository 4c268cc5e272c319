//! Deterministic random numbers for reproducible runs.
//!
//! All randomness in the crate flows through [`DetRng`], a xoshiro256++ generator
//! with a Box-Muller layer for standard normals. Seeding a generator from the same
//! `u64` always yields the same stream on every platform, which is what makes
//! byte-identical training artifacts possible. Independent streams (weight init,
//! data sampling, latent sampling) are derived from one master seed via
//! [`subseed`] so that adding a consumer never perturbs the others.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

/// Deterministic generator: xoshiro256++ core plus a cached Box-Muller spare.
///
/// The spare is part of the serialized state so a checkpointed run resumes the
/// exact stream it would have produced without the interruption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetRng {
    core: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl DetRng {
    /// Seeds the generator. The `u64` is expanded to the full 256-bit state with
    /// SplitMix64 (the expansion `seed_from_u64` performs), so nearby seeds still
    /// produce unrelated streams.
    pub fn from_seed(seed: u64) -> Self {
        DetRng {
            core: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Next raw 64-bit output of the core generator.
    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform draw in `[0, 1)` with full 53-bit mantissa resolution.
    pub fn uniform(&mut self) -> f64 {
        // Top 53 bits scaled by 2^-53: the standard exact-double construction.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller.
    ///
    /// Each transform consumes two uniforms and yields two normals; the second is
    /// cached and returned by the next call, so normals cost one uniform each on
    /// average.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Map uniform() from [0,1) to (0,1] so the log never sees zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills `buf` with independent standard normals.
    pub fn fill_normal(&mut self, buf: &mut [f64]) {
        for x in buf.iter_mut() {
            *x = self.normal();
        }
    }

    /// Fills `buf` with independent uniforms in `[0, 1)`.
    pub fn fill_uniform(&mut self, buf: &mut [f64]) {
        for x in buf.iter_mut() {
            *x = self.uniform();
        }
    }
}

/// Derives a child seed for the numbered `stream` from a master seed.
///
/// A SplitMix64 finalizer over `master + (stream+1) * odd-constant` keeps the
/// children statistically independent of each other and of the master.
pub fn subseed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add((stream.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
