//! 2-D cross-correlation via im2col + SGEMM.

use super::{Element, Shape, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of `(k - 1) / 2`; output is `ceil(dim / stride)`.
    Same,
    Explicit(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<T = f32> {
    /// (out_channels, in_channels, kh, kw)
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Option<Tensor4<T>>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

impl<T: Element> ConvLayerParams<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>, stride: usize, padding: Padding) -> Result<Self> {
        let ws = weights.shape();
        if ws.h.is_multiple_of(2) || ws.w.is_multiple_of(2) {
            return Err(Error::param(format!(
                "kernel must have odd extents, got {}x{}",
                ws.h, ws.w
            )));
        }
        if stride == 0 {
            return Err(Error::param("stride must be positive"));
        }
        if bias.len() != ws.n {
            return Err(Error::shape(
                "ConvLayerParams::new",
                format!("{} bias values for {} filters", bias.len(), ws.n),
            ));
        }
        Ok(ConvLayerParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn cast<U: Element>(&self) -> ConvLayerParams<U> {
        ConvLayerParams {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Weight plus bias scalar count.
    pub fn num_params(&self) -> usize {
        self.weights.shape().numel() + self.bias.len()
    }

    /// Output shape for an input of `input` shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let g = self.geometry(input, "conv2d")?;
        Ok(Shape::new(input.n, self.out_channels(), g.ho, g.wo))
    }

    fn geometry(&self, input: Shape, op: &'static str) -> Result<Geometry> {
        let ws = self.weights.shape();
        if input.c != ws.c {
            return Err(Error::shape(
                op,
                format!(
                    "input {input} has {} channels but kernel {ws} expects {}",
                    input.c, ws.c
                ),
            ));
        }
        let (ph, pw) = match self.padding {
            Padding::Same => ((ws.h - 1) / 2, (ws.w - 1) / 2),
            Padding::Explicit(ph, pw) => (ph, pw),
        };
        if input.h + 2 * ph < ws.h || input.w + 2 * pw < ws.w {
            return Err(Error::shape(
                op,
                format!("input {input} is smaller than kernel {ws} after padding"),
            ));
        }
        Ok(Geometry {
            cin: ws.c,
            h: input.h,
            w: input.w,
            kh: ws.h,
            kw: ws.w,
            ph,
            pw,
            stride: self.stride,
            ho: (input.h + 2 * ph - ws.h) / self.stride + 1,
            wo: (input.w + 2 * pw - ws.w) / self.stride + 1,
        })
    }
}

/// Unfolds one image (cin, h, w) into a (cin*kh*kw, ho*wo) row-major matrix.
fn im2col<T: Element>(src: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        *v = if ix >= 0 && ix < g.w as isize {
                            src_row[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image buffer.
fn col2im<T: Element>(cols: &[T], g: &Geometry, dst: &mut [T]) {
    let p = g.p();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d<T: Element>(input: &Tensor4<T>, params: &ConvLayerParams<T>) -> Result<Tensor4<T>> {
    let s = input.shape();
    let g = params.geometry(s, "conv2d")?;
    let cout = params.out_channels();
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor4::zeros(Shape::new(s.n, cout, g.ho, g.wo))?;
    let mut cols = vec![T::zero(); k * p];
    for n in 0..s.n {
        im2col(input.item(n), &g, &mut cols);
        let dst = out.item_mut(n);
        T::gemm(
            cout,
            k,
            p,
            params.weights.data(),
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            T::zero(),
            dst,
        );
        for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
            let b = params.bias[o];
            chunk.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d(input))` w.r.t. input, weights and bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor4<T>,
    params: &ConvLayerParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_impl(input, params, grad_out, true)
}

pub(crate) fn conv2d_backward_impl<T: Element>(
    input: &Tensor4<T>,
    params: &ConvLayerParams<T>,
    grad_out: &Tensor4<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let g = params.geometry(s, "conv2d_backward")?;
    let cout = params.out_channels();
    let expected = Shape::new(s.n, cout, g.ho, g.wo);
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out is {} but conv2d of {s} produces {expected}", grad_out.shape()),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let mut grad_w = params.weights.zeros_like();
    let mut grad_b = vec![0.0f64; cout];
    let mut grad_in = if want_input { Some(input.zeros_like()) } else { None };
    let mut cols = vec![T::zero(); k * p];
    for n in 0..s.n {
        let gout = grad_out.item(n);
        for (o, chunk) in gout.chunks_exact(p).enumerate() {
            grad_b[o] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        im2col(input.item(n), &g, &mut cols);
        // dW (cout x k) += gout (cout x p) * cols^T (p x k)
        T::gemm(
            cout,
            p,
            k,
            gout,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            T::one(),
            grad_w.data_mut(),
        );
        if let Some(gi) = grad_in.as_mut() {
            // dcols (k x p) = W^T (k x cout) * gout (cout x p)
            T::gemm(
                k,
                cout,
                p,
                params.weights.data(),
                (1, k as isize),
                gout,
                (p as isize, 1),
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &g, gi.item_mut(n));
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b.into_iter().map(T::from_f64).collect(),
    })
}
