use super::{Element, Shape, Tensor4};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Infer,
}

/// What the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    normalized: Tensor4<T>,
    inv_std: Vec<f64>,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn cast<U: Element>(&self) -> BatchNormParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BatchNormParams {
            scale: conv(&self.scale),
            shift: conv(&self.shift),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, s: Shape, op: &'static str) -> Result<()> {
        let c = self.channels();
        if s.c != c || self.shift.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape(
                op,
                format!("input {s} against batch-norm parameters for {c} channels"),
            ));
        }
        Ok(())
    }
}

/// Per-channel normalization. Train mode returns a cache for
/// [`batchnorm_backward`] and folds the batch statistics into the running ones.
pub fn batchnorm<T: Element>(
    input: &Tensor4<T>,
    params: &mut BatchNormParams<T>,
    mode: BnMode,
) -> Result<(Tensor4<T>, Option<BatchNormCache<T>>)> {
    let s = input.shape();
    params.check(s, "batchnorm")?;
    match mode {
        BnMode::Infer => Ok((batchnorm_infer(input, params)?, None)),
        BnMode::Train => {
            let count = (s.n * s.plane()) as f64;
            let mut out = input.zeros_like();
            let mut normalized = input.zeros_like();
            let mut inv_std = Vec::with_capacity(s.c);
            for c in 0..s.c {
                let mut sum = 0.0f64;
                for n in 0..s.n {
                    sum += input.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for n in 0..s.n {
                    sq += input
                        .plane(n, c)
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let inv = 1.0 / (var + params.epsilon).sqrt();
                let (g, b) = (params.scale[c].as_f64(), params.shift[c].as_f64());
                for n in 0..s.n {
                    let src = input.plane(n, c);
                    let xh = normalized.plane_mut(n, c);
                    for (h, &x) in xh.iter_mut().zip(src) {
                        *h = T::from_f64((x.as_f64() - mean) * inv);
                    }
                    for (o, &h) in out.plane_mut(n, c).iter_mut().zip(xh.iter()) {
                        *o = T::from_f64(g * h.as_f64() + b);
                    }
                }
                inv_std.push(inv);
                let m = params.momentum;
                params.running_mean[c] = T::from_f64((1.0 - m) * params.running_mean[c].as_f64() + m * mean);
                params.running_var[c] = T::from_f64((1.0 - m) * params.running_var[c].as_f64() + m * var);
            }
            Ok((out, Some(BatchNormCache { normalized, inv_std })))
        }
    }
}

/// Inference-mode normalization with the running statistics.
pub fn batchnorm_infer<T: Element>(input: &Tensor4<T>, params: &BatchNormParams<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    params.check(s, "batchnorm")?;
    let mut out = input.zeros_like();
    for c in 0..s.c {
        let inv = 1.0 / (params.running_var[c].as_f64() + params.epsilon).sqrt();
        let a = params.scale[c].as_f64() * inv;
        let b = params.shift[c].as_f64() - params.running_mean[c].as_f64() * a;
        let (a, b) = (T::from_f64(a), T::from_f64(b));
        for n in 0..s.n {
            let src = input.plane(n, c);
            for (o, &x) in out.plane_mut(n, c).iter_mut().zip(src) {
                *o = a * x + b;
            }
        }
    }
    Ok(out)
}

/// Gradients w.r.t. (input, scale, shift) of a train-mode batch-norm,
/// propagated through the batch mean and variance.
pub fn batchnorm_backward<T: Element>(
    cache: &BatchNormCache<T>,
    params: &BatchNormParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let s = grad_out.shape();
    params.check(s, "batchnorm_backward")?;
    if cache.normalized.shape() != s {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("grad_out {s} against cached activations {}", cache.normalized.shape()),
        ));
    }
    let count = (s.n * s.plane()) as f64;
    let mut grad_in = grad_out.zeros_like();
    let mut grad_scale = Vec::with_capacity(s.c);
    let mut grad_shift = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mut sum_g = 0.0f64;
        let mut sum_gh = 0.0f64;
        for n in 0..s.n {
            for (&g, &h) in grad_out.plane(n, c).iter().zip(cache.normalized.plane(n, c)) {
                sum_g += g.as_f64();
                sum_gh += g.as_f64() * h.as_f64();
            }
        }
        grad_shift.push(T::from_f64(sum_g));
        grad_scale.push(T::from_f64(sum_gh));
        let k = params.scale[c].as_f64() * cache.inv_std[c] / count;
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let h = cache.normalized.plane(n, c);
            for ((d, &g), &h) in grad_in.plane_mut(n, c).iter_mut().zip(g).zip(h) {
                *d = T::from_f64(k * (count * g.as_f64() - sum_g - h.as_f64() * sum_gh));
            }
        }
    }
    Ok((grad_in, grad_scale, grad_shift))
}
