//! Deterministic pseudo-random generator for weight synthesis and the
//! property suite.
//!
//! SplitMix64 with the standard constants. Hand-rolled so that synthesized
//! weights and property-suite instances are bit-stable across platforms and
//! dependency upgrades, which the model/bank fingerprinting relies on.

/// SplitMix64 stream. Same seed, same sequence, forever.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-scale, scale).
    pub fn uniform(&mut self, scale: f64) -> f64 {
        scale * (2.0 * self.next_f64() - 1.0)
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Fill a f32 tensor with uniform values in [-scale, scale).
    pub fn fill_uniform(&mut self, out: &mut [f32], scale: f64) {
        for v in out.iter_mut() {
            *v = self.uniform(scale) as f32;
        }
    }

    /// A fresh stream whose seed is derived from this one.
    pub fn fork(&mut self) -> SplitMix64 {
        SplitMix64::new(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn known_first_output() {
        // Reference value for SplitMix64(seed=0), first output.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn uniform_in_range() {
        let mut r = SplitMix64::new(3);
        for _ in 0..1000 {
            let x = r.uniform(0.5);
            assert!((-0.5..0.5).contains(&x));
        }
    }
}
