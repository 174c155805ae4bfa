//! Deterministic quasi-random state sampling.
//!
//! Requirement screening and reaction-norm estimation probe boxes of
//! component values. A Halton sequence covers such boxes far more evenly
//! than pseudo-random draws at the budgets involved (hundreds to a few
//! thousand points), and it is reproducible by construction: the same
//! seed and budget enumerate the same points on every platform and in
//! every run, regardless of thread count.
//!
//! Points are mapped into open intervals `(lo, hi)`: radical-inverse
//! values never hit 0 or 1, so degenerate box corners are never sampled.

/// First primes, used as per-dimension Halton bases. More than enough
/// dimensions for any model in the family.
const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Van der Corput radical inverse of `n` in base `b`, in (0, 1) for n > 0.
fn radical_inverse(mut n: u64, b: u64) -> f64 {
    let mut inv = 0.0;
    let mut denom = 1.0;
    while n > 0 {
        denom *= b as f64;
        inv += (n % b) as f64 / denom;
        n /= b;
    }
    inv
}

/// Halton point stream over `dim` dimensions in the open unit cube.
///
/// The seed rotates the start index, giving distinct but individually
/// deterministic streams.
#[derive(Clone, Debug)]
pub struct HaltonSampler {
    dim: usize,
    next_index: u64,
}

impl HaltonSampler {
    pub fn new(dim: usize, seed: u64) -> HaltonSampler {
        assert!(dim <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
        // Start past index 0 (which maps to the origin) and offset by a
        // large odd stride per seed so streams do not share prefixes.
        HaltonSampler {
            dim,
            next_index: 1 + seed.wrapping_mul(1009),
        }
    }

    /// Next point, written into `out[..dim]`, each coordinate in (0, 1).
    pub fn next_unit(&mut self, out: &mut [f64]) {
        let n = self.next_index;
        self.next_index += 1;
        for (d, slot) in out.iter_mut().take(self.dim).enumerate() {
            *slot = radical_inverse(n, PRIMES[d]);
        }
    }

    /// Next point mapped into the open box with the given per-dimension
    /// bounds.
    pub fn next_in_box(&mut self, bounds: &[(f64, f64)], out: &mut [f64]) {
        debug_assert_eq!(bounds.len(), self.dim);
        self.next_unit(out);
        for (slot, (lo, hi)) in out.iter_mut().zip(bounds) {
            *slot = lo + (hi - lo) * *slot;
        }
    }
}
