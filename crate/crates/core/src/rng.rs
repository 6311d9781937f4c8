//! Seeded xorshift64* generator used for every random draw in scene generation.
//!
//! The algorithm is fixed so scenes can be regenerated bit-exactly by other
//! implementations:
//!
//! * state init: one SplitMix64 step applied to the seed (a zero result is
//!   replaced by `0x9E3779B97F4A7C15`);
//! * `next_u64`: `x ^= x >> 12; x ^= x << 25; x ^= x >> 27; state = x;`
//!   return `x * 0x2545F4914F6CDD1D` (wrapping);
//! * `next_f64`: `(next_u64() >> 11) * 2^-53`, uniform in `[0, 1)`;
//! * `below(n)`: high 64 bits of the 128-bit product `next_u64() * n`;
//! * `gaussian`: Box-Muller on `u1 = 1 - next_f64()`, `u2 = next_f64()`,
//!   returning `sqrt(-2 ln u1) cos(2 pi u2)` and caching
//!   `sqrt(-2 ln u1) sin(2 pi u2)` for the following call. Transcendentals
//!   come from the `libm` crate so results do not depend on the platform libm.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
    spare: Option<f64>,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let state = match splitmix64(seed) {
            0 => SPLITMIX_GAMMA,
            s => s,
        };
        Self { state, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.below((hi - lo + 1) as u64) as i64
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(angle));
        radius * libm::cos(angle)
    }

    /// Fisher-Yates shuffle of `0..n`, swapping `i` with `below(i + 1)` for
    /// `i = n-1 .. 1`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}
