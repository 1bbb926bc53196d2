//! Discrete Fourier transform in the plain sum convention:
//! `X[k] = sum_n x[n] exp(-2 pi i k n / L)` and the inverse carries the `1/L`.
//! Parseval therefore reads `||x||^2 = ||X||^2 / L`.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub use rustfft::num_complex::Complex64 as Complex;

pub fn dft_1d(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        FftPlanner::new()
            .plan_fft_forward(buf.len())
            .process(&mut buf);
    }
    buf
}

pub fn idft_1d(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        FftPlanner::new()
            .plan_fft_inverse(buf.len())
            .process(&mut buf);
        let s = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
    buf
}

/// Forward/inverse plan pair for repeated transforms of one length.
#[derive(Clone)]
pub struct DftPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for DftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DftPlan").field("len", &self.len).finish()
    }
}

impl DftPlan {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        DftPlan {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    /// Inverse including the `1/L` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        let s = 1.0 / self.len as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let l = x.len();
        (0..l)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(n, v)| {
                        let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / l as f64;
                        v * Complex64::new(a.cos(), a.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn random(l: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..l)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn constant_vector_has_only_dc() {
        let x = vec![Complex64::new(2.5, 0.0); 12];
        let spec = dft_1d(&x);
        assert!((spec[0].re - 30.0).abs() < 1e-12);
        assert!(spec[1..].iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn matches_naive_sum_and_round_trips() {
        for (l, seed) in [(1, 0), (7, 1), (16, 2), (30, 3)] {
            let x = random(l, seed);
            let fast = dft_1d(&x);
            let slow = naive_dft(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() <= 1e-5 * (1.0 + b.norm()));
            }
            let back = idft_1d(&fast);
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn parseval() {
        let x = random(64, 9);
        let e_time: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let e_freq: f64 = dft_1d(&x).iter().map(|v| v.norm_sqr()).sum::<f64>() / 64.0;
        assert!((e_time - e_freq).abs() <= 1e-5 * e_time);
    }
}
