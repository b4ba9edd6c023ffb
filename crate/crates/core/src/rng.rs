//! Deterministic random numbers: PCG32 with Box-Muller Gaussians.
//!
//! Training runs, latent initialization, and shuffling all draw from this
//! generator so that a seed fully determines a run.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PCG32 (XSH-RR) constants from the reference implementation.
const PCG_MULTIPLIER: u64 = 6364136223846793005;
const PCG_INCREMENT: u64 = 1442695040888963407;

/// Seeded PCG32 stream plus the cached second output of each Box-Muller pair.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_gaussian: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng {
            state: 0,
            spare_gaussian: None,
        };
        rng.step();
        rng.state = rng.state.wrapping_add(seed);
        rng.step();
        rng
    }

    #[inline]
    fn step(&mut self) -> u64 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULTIPLIER).wrapping_add(PCG_INCREMENT);
        old
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        let old = self.step();
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// Uniform draw in `[0, n)` via the multiply-shift reduction.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0 && n <= u32::MAX as usize);
        ((self.next_u32() as u64 * n as u64) >> 32) as usize
    }

    /// Uniform in `(0, 1]`; never zero, so it is safe under `ln`.
    #[inline]
    fn uniform_open0(&mut self) -> f64 {
        (self.next_u32() as f64 + 1.0) * (1.0 / 4294967296.0)
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    fn uniform(&mut self) -> f64 {
        self.next_u32() as f64 * (1.0 / 4294967296.0)
    }

    /// Standard normal draw (Box-Muller, pairs cached).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.spare_gaussian.take() {
            return v;
        }
        let r = (-2.0 * self.uniform_open0().ln()).sqrt();
        let theta = std::f64::consts::TAU * self.uniform();
        let (s, c) = theta.sin_cos();
        self.spare_gaussian = Some(r * s);
        r * c
    }

    /// Seeded Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        if items.len() < 2 {
            return;
        }
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. standard normal draws.
pub fn rng_normal<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.next_gaussian())).collect();
    Tensor::from_vec(shape, data).expect("invalid shape for rng_normal")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(1);
        for _ in 0..100 {
            assert_eq!(a.next_u32(), b.next_u32());
        }
        let ta: Tensor<f32> = rng_normal(&mut Rng::new(1), &[16]);
        let tb: Tensor<f32> = rng_normal(&mut Rng::new(1), &[16]);
        assert_eq!(ta, tb);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        assert_ne!(
            (0..8).map(|_| a.next_u32()).collect::<Vec<_>>(),
            (0..8).map(|_| b.next_u32()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn normal_shape_contract() {
        let t: Tensor<f64> = rng_normal(&mut Rng::new(3), &[2, 3]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(7);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = rng.next_gaussian();
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(11);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
