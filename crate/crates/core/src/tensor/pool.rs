use super::{Element, Shape, Tensor4};
use crate::error::{Error, Result};

/// Winning input position of every pooled output, for routing gradients back.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    input_shape: Shape,
    /// Per output element: offset of the argmax within its input (h, w) plane.
    argmax: Vec<u32>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }
}

/// 2x2 max pooling with stride 2. A trailing odd row or column is dropped.
/// Ties resolve to the lowest flat index in the window.
pub fn maxpool2x2<T: Element>(input: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let s = input.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("input {s} needs at least 2 rows and 2 columns"),
        ));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(Shape::new(s.n, s.c, ho, wo))?;
    let mut argmax = Vec::with_capacity(out.shape().numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = 2 * oy * s.w + 2 * ox;
                    let mut best = base;
                    for cand in [base + 1, base + s.w, base + s.w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[oy * wo + ox] = src[best];
                    argmax.push(best as u32);
                }
            }
        }
    }
    Ok((out, PoolIndices { input_shape: s, argmax }))
}

pub fn maxpool2x2_backward<T: Element>(indices: &PoolIndices, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = indices.input_shape;
    let expected = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "maxpool2x2_backward",
            format!("grad_out is {} but pooling produced {expected}", grad_out.shape()),
        ));
    }
    let mut grad_in = Tensor4::zeros(s)?;
    let plane_out = expected.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = n * s.c + c;
            let idx = &indices.argmax[k * plane_out..(k + 1) * plane_out];
            let g = grad_out.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for (&i, &v) in idx.iter().zip(g) {
                dst[i as usize] += v;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{central_difference, dot, max_rel_error, random_tensor};

    #[test]
    fn picks_window_max() {
        let x = Tensor4::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn odd_trailing_row_and_col_are_dropped() {
        let x = random_tensor(Shape::new(1, 2, 5, 7), 1);
        let (y, _) = maxpool2x2(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 3));
    }

    #[test]
    fn too_small_input_is_rejected() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 1, 1, 4)).unwrap();
        assert!(maxpool2x2(&x).is_err());
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let x = Tensor4::filled(Shape::new(1, 1, 4, 4), 3.0f32).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let g = Tensor4::filled(y.shape(), 1.0f32).unwrap();
        let gi = maxpool2x2_backward(&idx, &g).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let expect = if yy % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(gi.get(0, 0, yy, xx), expect);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_away_from_ties() {
        let mut x = random_tensor(Shape::new(1, 4, 10, 10), 2);
        // Spread values so every window max is unique by a wide margin.
        let n = x.data().len();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % n) as f32 * 0.05 - 10.0;
        }
        let (y, idx) = maxpool2x2(&x).unwrap();
        let g = random_tensor(y.shape(), 3);
        let gi = maxpool2x2_backward(&idx, &g).unwrap();
        let fd = central_difference(x.data(), 1e-3, |v| {
            let t = Tensor4::from_vec(x.shape(), v.to_vec()).unwrap();
            let (y, _) = maxpool2x2(&t).unwrap();
            dot(y.data(), g.data())
        });
        assert!(max_rel_error(gi.data(), &fd) < 1e-3);
    }
}
