//! Counter-based pseudo-random numbers.
//!
//! Every draw is a pure function of `(key, counter)`, so a tensor element can
//! be generated from its flat index alone, in any order, on any thread, and
//! reproduced bit-for-bit by another implementation of the same recipe:
//!
//! ```text
//! mix(z):   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!           z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!           z ^ (z >> 31)                                  (wrapping u64)
//! key     = mix(seed ^ 0x5851F42D4C957F2D)
//! bits(c) = mix(key + (c + 1) * 0x9E3779B97F4A7C15)
//! uniform(c) = (bits(c) >> 11) * 2^-53                     in [0, 1)
//! normal(c)  = sqrt(-2 ln(1 - uniform(2c))) * cos(2 pi uniform(2c + 1))
//! substream(id) = CounterRng with key' = mix(key ^ (id + 1) * 0xD1B54A32D192ED03)
//! ```

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { key: mix(seed ^ 0x5851_F42D_4C95_7F2D) }
    }

    /// Independent generator for a named sub-stream (a head, a tensor role...).
    pub fn substream(&self, id: u64) -> Self {
        CounterRng { key: mix(self.key ^ id.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)) }
    }

    #[inline]
    pub fn bits(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        (self.bits(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on counters `2c` and `2c + 1`.
    #[inline]
    pub fn normal(&self, counter: u64) -> f64 {
        let u1 = self.uniform(counter.wrapping_mul(2));
        let u2 = self.uniform(counter.wrapping_mul(2).wrapping_add(1));
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
