//! Reproducible randomness.
//!
//! Every simulated path draws from its own ChaCha8 stream selected by the path
//! index, so a path's increments depend only on `(seed, path)` and never on
//! how paths are distributed across worker threads. Audits use a rotated
//! Halton sequence instead of pseudo-random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Generator for path `path` under master seed `seed`.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Fills `out` with independent `N(0, variance)` draws.
pub fn fill_normal<R: Rng>(rng: &mut R, variance: f64, out: &mut [f64]) {
    let sd = variance.sqrt();
    for v in out {
        let n: f64 = rng.sample(StandardNormal);
        *v = sd * n;
    }
}

/// SplitMix64 finalizer; used to derive sub-seeds and hash counters.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` from a 64-bit hash.
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Derives an independent seed for a labelled sub-experiment.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

const PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// Halton low-discrepancy sequence with a seed-dependent Cranley-Patterson shift.
#[derive(Debug, Clone)]
pub struct Halton {
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim <= PRIMES.len(), "Halton dimension {dim} exceeds {}", PRIMES.len());
        let shift = (0..dim).map(|i| unit_from_bits(mix64(seed.wrapping_add(i as u64 * 0x51)))).collect();
        Halton { shift }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Point `index` of the sequence, written into `out`.
    pub fn point(&self, index: u64, out: &mut [f64]) {
        for (d, v) in out.iter_mut().enumerate().take(self.shift.len()) {
            let mut r = radical_inverse(index + 1, PRIMES[d]) + self.shift[d];
            if r >= 1.0 {
                r -= 1.0;
            }
            *v = r;
        }
    }
}

fn radical_inverse(mut n: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while n > 0 {
        r += (n % b) as f64 * f;
        n /= b;
        f *= inv;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = path_rng(7, 3);
        let mut b = path_rng(7, 3);
        let mut c = path_rng(7, 4);
        let (mut xa, mut xb, mut xc) = ([0.0; 8], [0.0; 8], [0.0; 8]);
        fill_normal(&mut a, 1.0, &mut xa);
        fill_normal(&mut b, 1.0, &mut xb);
        fill_normal(&mut c, 1.0, &mut xc);
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn halton_fills_unit_cube() {
        let h = Halton::new(3, 11);
        let mut p = [0.0; 3];
        let mut mean = [0.0; 3];
        let n = 4096;
        for i in 0..n {
            h.point(i, &mut p);
            for d in 0..3 {
                assert!((0.0..1.0).contains(&p[d]));
                mean[d] += p[d] / n as f64;
            }
        }
        for m in mean {
            assert!((m - 0.5).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn radical_inverse_base_two() {
        assert_eq!(radical_inverse(1, 2), 0.5);
        assert_eq!(radical_inverse(2, 2), 0.25);
        assert_eq!(radical_inverse(3, 2), 0.75);
    }
}
