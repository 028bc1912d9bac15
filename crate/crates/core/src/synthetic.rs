//! Seeded synthetic series for tests, benchmarks and the CLI `synth` command.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("finite non-negative sigma")
}

fn periods(i: usize) -> (f64, f64, f64) {
    // (fast period, slow period, phase) per variable
    const P: [(f64, f64); 4] = [(24.0, 9.0), (16.0, 40.0), (30.0, 12.0), (20.0, 7.0)];
    let (a, b) = P[i % P.len()];
    (a, b, 0.7 * i as f64)
}

/// Sum of two sinusoids per variable plus Gaussian noise of `noise` times the
/// peak amplitude (`noise = 0.01` is 1% noise). Returns `[T, n]`.
pub fn sinusoids(len: usize, n: usize, noise: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = normal(noise * 1.5);
    let mut data = Vec::with_capacity(len * n);
    for t in 0..len {
        for i in 0..n {
            let (a, b, phase) = periods(i);
            let tf = t as f64;
            let v = (2.0 * PI * tf / a + phase).sin() + 0.5 * (2.0 * PI * tf / b + 2.0 * phase).sin();
            data.push(v + dist.sample(&mut rng));
        }
    }
    Tensor::new([len, n], data).expect("positive length")
}

/// Positive-level sinusoids whose every value is multiplied by `factor` from
/// row `shift_at` onwards.
pub fn level_shift(len: usize, n: usize, shift_at: usize, factor: f64, noise: f64, seed: u64) -> Tensor {
    let base = sinusoids(len, n, noise, seed);
    let mut data = base.into_data();
    for (k, v) in data.iter_mut().enumerate() {
        *v = 2.0 + 0.5 * *v;
        if k / n >= shift_at {
            *v *= factor;
        }
    }
    Tensor::new([len, n], data).expect("positive length")
}

/// Independent AR(1) processes `x_t = φ·x_{t−1} + ε_t`, `ε ~ N(0, σ²)`.
pub fn ar1(len: usize, n: usize, phi: f64, sigma: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = normal(sigma);
    let mut data = vec![0.0; len * n];
    for t in 1..len {
        for i in 0..n {
            data[t * n + i] = phi * data[(t - 1) * n + i] + dist.sample(&mut rng);
        }
    }
    Tensor::new([len, n], data).expect("positive length")
}

/// Gaussian random walks starting at zero.
pub fn random_walk(len: usize, n: usize, sigma: f64, seed: u64) -> Tensor {
    ar1(len, n, 1.0, sigma, seed)
}
