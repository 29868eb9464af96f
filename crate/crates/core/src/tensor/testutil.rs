//! Finite-difference helpers shared by the kernel unit tests.
//!
//! The objective handed to [`central_difference`] is evaluated in `f64`
//! (the kernels are generic over the element type), so the numeric
//! derivative carries no single-precision rounding noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Shape, Tensor4};

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `sum(a * b)` in f64.
pub fn dot<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f32], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = widen(x);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1e-2)`; the floor keeps
/// near-zero gradients from turning rounding noise into huge ratios.
pub fn max_rel_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let a = a as f64;
            (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
        })
        .fold(0.0, f64::max)
}
