//! Counter-based random number generation.
//!
//! Every Gaussian increment is a pure function of `(seed, path, step)`, so
//! simulations are bit-reproducible regardless of how paths are scheduled
//! across worker threads.

use statrs::function::erf::erfc_inv;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const MIX_A: u64 = 0xbf58_476d_1ce4_e5b9;
const MIX_B: u64 = 0x94d0_49bb_1331_11eb;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
    z ^ (z >> 31)
}

/// Stateless counter-keyed generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed ^ GOLDEN),
        }
    }

    /// Derives an independent stream, e.g. one per observation point.
    pub fn substream(&self, index: u64) -> Self {
        CounterRng {
            key: mix(self.key ^ index.wrapping_mul(GOLDEN).wrapping_add(1)),
        }
    }

    #[inline]
    fn word(&self, path: u64, step: u64) -> u64 {
        let h = mix(self.key ^ path.wrapping_mul(MIX_A));
        mix(h ^ step.wrapping_mul(MIX_B))
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, path: u64, step: u64) -> f64 {
        // 53 mantissa bits, offset by half an ulp so 0 and 1 are excluded.
        ((self.word(path, step) >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw via the inverse CDF.
    #[inline]
    pub fn standard_normal(&self, path: u64, step: u64) -> f64 {
        let p = self.uniform(path, step);
        -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
    }
}
