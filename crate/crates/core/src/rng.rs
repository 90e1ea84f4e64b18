//! Seeded random number generation.
//!
//! Everything downstream (weight init, noise injection, batch shuffling,
//! phantom drawing) pulls from this one generator so that runs are
//! bit-reproducible across platforms. The generator is xoshiro256**
//! seeded through splitmix64; normal draws use Box-Muller without a
//! cached spare so the full state is the four words.

/// splitmix64 step, used for seeding and for deriving sub-stream seeds.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream label into an independent sub-seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut s = seed ^ label.wrapping_mul(0xA076_1D64_78BD_642F);
    let a = splitmix64(&mut s);
    splitmix64(&mut s) ^ a.rotate_left(17)
}

/// xoshiro256** generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for w in s.iter_mut() {
            *w = splitmix64(&mut sm);
        }
        // all-zero state is the one invalid seed for xoshiro
        if s == [0, 0, 0, 0] {
            s[0] = 0x9E37_79B9_7F4A_7C15;
        }
        Rng { s }
    }

    /// An independent generator for the given stream label.
    pub fn substream(seed: u64, label: u64) -> Rng {
        Rng::new(derive_seed(seed, label))
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn from_state(s: [u64; 4]) -> Rng {
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        // multiply-shift; desk-scale n makes the modulo bias irrelevant,
        // but this is exact anyway
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch only, so the
    /// generator state is the complete state).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Rayleigh draw with scale sigma (mean sigma*sqrt(pi/2)).
    pub fn rayleigh(&mut self, sigma: f64) -> f64 {
        let u = loop {
            let u = self.uniform();
            if u < 1.0 {
                break u;
            }
        };
        sigma * libm::sqrt(-2.0 * libm::log(1.0 - u))
    }

    /// Poisson draw. Knuth's product method below lambda = 10, Hormann's
    /// PTRS transformed rejection above it.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        if lambda < 10.0 {
            let limit = libm::exp(-lambda);
            let mut count = 0u64;
            let mut prod = self.uniform();
            while prod > limit {
                count += 1;
                prod *= self.uniform();
            }
            count
        } else {
            self.poisson_ptrs(lambda)
        }
    }

    fn poisson_ptrs(&mut self, lambda: f64) -> u64 {
        let slam = libm::sqrt(lambda);
        let loglam = libm::log(lambda);
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = libm::floor((2.0 * a / us + b) * u + lambda + 0.43);
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if libm::log(v) + libm::log(inv_alpha) - libm::log(a / (us * us) + b)
                <= k * loglam - lambda - libm::lgamma(k + 1.0)
            {
                return k as u64;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    extern crate std;
    use alloc::vec::Vec;

    #[test]
    fn deterministic_per_seed() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(7);
        for _ in 0..17 {
            a.next_u64();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(11);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 5e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 5e-3, "var {var}");
    }

    #[test]
    fn rayleigh_moments() {
        let sigma = 0.28;
        let mut rng = Rng::new(13);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = rng.rayleigh(sigma);
            assert!(x >= 0.0);
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let mean_expect = sigma * libm::sqrt(core::f64::consts::PI / 2.0);
        let var_expect = (2.0 - core::f64::consts::PI / 2.0) * sigma * sigma;
        assert!((mean / mean_expect - 1.0).abs() < 0.01, "mean {mean} vs {mean_expect}");
        assert!((var / var_expect - 1.0).abs() < 0.01, "var {var} vs {var_expect}");
    }

    #[test]
    fn poisson_moments_small_and_large_lambda() {
        for &(seed, lambda) in &[(3u64, 0.7f64), (5, 4.0), (9, 35.0), (17, 900.0)] {
            let mut rng = Rng::new(seed);
            let n = 1_000_000;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let x = rng.poisson(lambda) as f64;
                sum += x;
                sumsq += x * x;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            assert!((mean / lambda - 1.0).abs() < 0.01, "lambda {lambda}: mean {mean}");
            assert!((var / lambda - 1.0).abs() < 0.01, "lambda {lambda}: var {var}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(21);
        let mut v: Vec<usize> = (0..37).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..37).collect::<Vec<_>>());
        assert_ne!(v, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn substreams_are_independent() {
        let a: Vec<u64> = {
            let mut r = Rng::substream(99, 0);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::substream(99, 1);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, b);
    }
}
