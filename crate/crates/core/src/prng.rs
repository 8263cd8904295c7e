//! Seeded pseudo-random source.
//!
//! The stream is pinned so that golden values are portable:
//!
//! - state advance and output mixing are SplitMix64;
//! - a uniform draw takes the top 53 bits of one output, `u = (x >> 11) * 2^-53`, in `[0, 1)`;
//! - a gaussian draw consumes two outputs `u1`, `u2` and returns
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`. The sine variate is discarded, so every
//!   gaussian advances the state by exactly two steps.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let i = (self.next_uniform() * n as f64) as usize;
        i.min(n - 1)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// SplitMix64 output function. Also used as a stand-alone integer hash.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
