use super::{Element, Shape, Tensor4};
use crate::error::{Error, Result};

pub fn relu<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Passes `grad_out` where `input > 0`. `input` may equally be the relu
/// output, since both are positive at the same positions.
pub fn relu_backward<T: Element>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("input {} vs grad_out {}", input.shape(), grad_out.shape()),
        ));
    }
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(g)
}

/// Softmax across channels at every (n, y, x).
pub fn softmax_channels<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.zeros_like();
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let src = input.item(n);
        let dst = out.item_mut(n);
        for i in 0..plane {
            let max = (0..s.c)
                .map(|c| src[c * plane + i].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = (src[c * plane + i].as_f64() - max).exp();
                denom += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                dst[c * plane + i] = T::from_f64(b / denom);
            }
        }
    }
    out
}

/// Nearest-neighbour resize: `out(y, x) = in(y * h / target_h, x * w / target_w)`.
pub fn upsample_nearest<T: Element>(input: &Tensor4<T>, target_h: usize, target_w: usize) -> Result<Tensor4<T>> {
    let s = input.shape();
    if target_h < s.h || target_w < s.w {
        return Err(Error::param(format!(
            "upsample target {target_h}x{target_w} is smaller than source {}x{}",
            s.h, s.w
        )));
    }
    let rows: Vec<usize> = (0..target_h).map(|y| y * s.h / target_h).collect();
    let cols: Vec<usize> = (0..target_w).map(|x| x * s.w / target_w).collect();
    let mut out = Tensor4::zeros(Shape::new(s.n, s.c, target_h, target_w))?;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &sy) in rows.iter().enumerate() {
                let src_row = &src[sy * s.w..(sy + 1) * s.w];
                for (d, &sx) in dst[y * target_w..(y + 1) * target_w].iter_mut().zip(&cols) {
                    *d = src_row[sx];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: every source cell receives the sum of its replicas.
pub fn upsample_nearest_backward<T: Element>(grad_out: &Tensor4<T>, source: Shape) -> Result<Tensor4<T>> {
    let g = grad_out.shape();
    if g.n != source.n || g.c != source.c || g.h < source.h || g.w < source.w {
        return Err(Error::shape(
            "upsample_nearest_backward",
            format!("grad_out {g} cannot come from source {source}"),
        ));
    }
    let mut grad_in = Tensor4::zeros(source)?;
    for n in 0..g.n {
        for c in 0..g.c {
            let src = grad_out.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for y in 0..g.h {
                let sy = y * source.h / g.h;
                for x in 0..g.w {
                    dst[sy * source.w + x * source.w / g.w] += src[y * g.w + x];
                }
            }
        }
    }
    Ok(grad_in)
}

/// Stacks tensors along the channel axis in the given order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::param("concat_channels needs at least one input"))?
        .shape();
    for (i, t) in inputs.iter().enumerate() {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {i} has shape {s}, incompatible with input 0 shape {first}"),
            ));
        }
    }
    let channels = inputs.iter().map(|t| t.shape().c).sum();
    let mut out = Tensor4::zeros(Shape::new(first.n, channels, first.h, first.w))?;
    let plane = first.plane();
    for n in 0..first.n {
        let dst = out.item_mut(n);
        let mut offset = 0;
        for t in inputs {
            let src = t.item(n);
            dst[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
        debug_assert_eq!(offset, channels * plane);
    }
    Ok(out)
}

/// Inverse of [`concat_channels`]: splits along channels into the given counts.
pub fn split_channels<T: Element>(input: &Tensor4<T>, channels: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let s = input.shape();
    if channels.iter().sum::<usize>() != s.c || channels.contains(&0) {
        return Err(Error::shape(
            "split_channels",
            format!("cannot split {s} into channel groups {channels:?}"),
        ));
    }
    let plane = s.plane();
    let mut parts: Vec<Tensor4<T>> = channels
        .iter()
        .map(|&c| Tensor4::zeros(Shape::new(s.n, c, s.h, s.w)))
        .collect::<Result<_>>()?;
    for n in 0..s.n {
        let src = input.item(n);
        let mut offset = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.item_mut(n).copy_from_slice(&src[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{central_difference, dot, max_rel_error, random_tensor};

    fn t(shape: Shape, v: Vec<f32>) -> Tensor4 {
        Tensor4::from_vec(shape, v).unwrap()
    }

    #[test]
    fn relu_clamps_and_masks() {
        let x = t(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = t(Shape::new(1, 1, 1, 3), vec![5.0, 5.0, 5.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn relu_on_positive_input_is_identity() {
        let mut x = random_tensor(Shape::new(1, 2, 3, 3), 1);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        assert_eq!(relu(&x), x);
        let g = random_tensor(x.shape(), 2);
        assert_eq!(relu_backward(&x, &g).unwrap(), g);
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let mut x = random_tensor(Shape::new(1, 3, 5, 5), 3);
        // keep every entry at least 0.05 away from the kink
        x.data_mut().iter_mut().for_each(|v| *v += 0.05f32.copysign(*v));
        let g = random_tensor(x.shape(), 4);
        let analytic = relu_backward(&x, &g).unwrap();
        let fd = central_difference(x.data(), 1e-3, |v| {
            let y = relu(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap());
            dot(y.data(), g.data())
        });
        assert!(max_rel_error(analytic.data(), &fd) < 1e-3);
    }

    #[test]
    fn softmax_symmetric_and_saturated() {
        let x = t(Shape::new(1, 2, 1, 2), vec![0.0, 1000.0, 0.0, 0.0]);
        let y = softmax_channels(&x);
        assert_eq!(y.get(0, 0, 0, 0), 0.5);
        assert_eq!(y.get(0, 1, 0, 0), 0.5);
        assert_eq!(y.get(0, 0, 0, 1), 1.0);
        assert_eq!(y.get(0, 1, 0, 1), 0.0);
    }

    #[test]
    fn softmax_matches_wide_precision_oracle() {
        let mut x = random_tensor(Shape::new(2, 3, 4, 4), 5);
        x.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        let y = softmax_channels(&x);
        for n in 0..2 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let logits: Vec<f64> = (0..3).map(|c| x.get(n, c, yy, xx) as f64).collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for (c, l) in logits.iter().enumerate() {
                        let p = (l - m).exp() / z;
                        assert!((y.get(n, c, yy, xx) as f64 - p).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_single_value_and_blocks() {
        let x = t(Shape::new(1, 1, 1, 1), vec![5.0]);
        assert_eq!(upsample_nearest(&x, 2, 2).unwrap().data(), &[5.0; 4]);

        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nearest(&x, 4, 4).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 1, 4, 4)).unwrap();
        assert!(upsample_nearest(&x, 3, 4).is_err());
    }

    #[test]
    fn upsample_backward_sums_replicas() {
        let g = random_tensor(Shape::new(1, 1, 4, 4), 6);
        let src = Shape::new(1, 1, 2, 2);
        let gi = upsample_nearest_backward(&g, src).unwrap();
        for sy in 0..2 {
            for sx in 0..2 {
                let expect: f32 = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (2 * sy + dy, 2 * sx + dx)))
                    .map(|(y, x)| g.get(0, 0, y, x))
                    .sum();
                assert!((gi.get(0, 0, sy, sx) - expect).abs() < 1e-6);
            }
        }
        let x = random_tensor(src, 7);
        let fd = central_difference(x.data(), 1e-3, |v| {
            let y = upsample_nearest(&Tensor4::from_vec(src, v.to_vec()).unwrap(), 4, 4).unwrap();
            dot(y.data(), g.data())
        });
        assert!(max_rel_error(gi.data(), &fd) < 1e-3);
    }

    #[test]
    fn upsample_odd_target_matches_finite_differences() {
        let src = Shape::new(2, 2, 3, 5);
        let x = random_tensor(src, 8);
        let g = random_tensor(Shape::new(2, 2, 7, 11), 9);
        let gi = upsample_nearest_backward(&g, src).unwrap();
        let fd = central_difference(x.data(), 1e-3, |v| {
            let y = upsample_nearest(&Tensor4::from_vec(src, v.to_vec()).unwrap(), 7, 11).unwrap();
            dot(y.data(), g.data())
        });
        assert!(max_rel_error(gi.data(), &fd) < 1e-3);
    }

    #[test]
    fn concat_counts_and_orders_channels() {
        let a = Tensor4::filled(Shape::new(1, 8, 6, 10), 1.0f32).unwrap();
        let b = Tensor4::filled(Shape::new(1, 16, 6, 10), 2.0).unwrap();
        let c = Tensor4::filled(Shape::new(1, 32, 6, 10), 3.0).unwrap();
        let y = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(y.shape().c, 56);
        assert_eq!(y.get(0, 7, 0, 0), 1.0);
        assert_eq!(y.get(0, 8, 0, 0), 2.0);
        assert_eq!(y.get(0, 24, 5, 9), 3.0);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_names_offending_input() {
        let a = Tensor4::<f32>::zeros(Shape::new(1, 1, 4, 4)).unwrap();
        let b = Tensor4::<f32>::zeros(Shape::new(1, 1, 4, 5)).unwrap();
        let err = concat_channels(&[&a, &a, &b]).unwrap_err().to_string();
        assert!(err.contains("input 2"), "{err}");
    }

    #[test]
    fn split_inverts_concat_bit_exactly() {
        let a = random_tensor(Shape::new(2, 3, 4, 5), 10);
        let b = random_tensor(Shape::new(2, 1, 4, 5), 11);
        let y = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(&y, &[3, 1]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }
}
