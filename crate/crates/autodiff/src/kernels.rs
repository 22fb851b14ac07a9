//! Convolution kernels on contiguous NCHW buffers, lowered to GEMM through
//! im2col.

use crate::float::Float;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

/// Square kernel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Window { k, stride, pad }
    }

    /// Output extent of a convolution over `input` samples.
    pub fn conv_out(self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.k && self.stride > 0).then(|| (padded - self.k) / self.stride + 1)
    }

    /// Output extent of the transposed convolution.
    pub fn deconv_out(self, input: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        ((input - 1) * self.stride + self.k).checked_sub(2 * self.pad)
    }
}

/// Unfolds one `c × h × w` sample into a `(c·k·k) × (ho·wo)` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, col: &mut [T]) {
    let Window { k, stride, pad } = win;
    let p = ho * wo;
    debug_assert_eq!(col.len(), c * k * k * p);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds the matrix back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Float>(col: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, x: &mut [T]) {
    let Window { k, stride, pad } = win;
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn bias_channels<T: Float>(b: Option<&Tensor<T>>, c: usize, what: &str) -> Result<()> {
    match b {
        Some(b) if b.len() != c => Err(Error::Dimension(format!(
            "{what} bias has {} values for {c} channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn square_kernel(w: Shape, what: &str) -> Result<usize> {
    if w.h() != w.w() || w.h() == 0 {
        return Err(Error::Dimension(format!("{what} kernel must be square, got {w}")));
    }
    Ok(w.h())
}

/// Output shape of a convolution with weights `[Cout, Cin, k, k]`.
pub fn conv_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<(Shape, Window)> {
    let k = square_kernel(w, "convolution")?;
    if x.c() != w.c() {
        return Err(Error::Dimension(format!(
            "convolution expects {} input channels, got {} (input {x}, weights {w})",
            w.c(),
            x.c()
        )));
    }
    let win = Window::new(k, stride, pad);
    match (win.conv_out(x.h()), win.conv_out(x.w())) {
        (Some(ho), Some(wo)) => Ok((Shape::new(x.n(), w.n(), ho, wo), win)),
        _ => Err(Error::Dimension(format!("input {x} too small for kernel {k}"))),
    }
}

/// Output shape of a transposed convolution with weights `[Cin, Cout, k, k]`.
pub fn deconv_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<(Shape, Window)> {
    let k = square_kernel(w, "deconvolution")?;
    if x.c() != w.n() {
        return Err(Error::Dimension(format!(
            "deconvolution expects {} input channels, got {} (input {x}, weights {w})",
            w.n(),
            x.c()
        )));
    }
    let win = Window::new(k, stride, pad);
    match (win.deconv_out(x.h()), win.deconv_out(x.w())) {
        (Some(ho), Some(wo)) if x.h() > 0 && x.w() > 0 && ho > 0 && wo > 0 => {
            Ok((Shape::new(x.n(), w.c(), ho, wo), win))
        }
        _ => Err(Error::Dimension(format!("input {x} too small for transposed kernel {k}"))),
    }
}

fn add_bias<T: Float>(y: &mut Tensor<T>, b: Option<&Tensor<T>>) {
    if let Some(b) = b {
        let plane = y.shape().plane();
        let c = y.shape().c();
        for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut db = vec![0.0f64; s.c()];
    for (i, chunk) in dy.data().chunks_exact(s.plane()).enumerate() {
        db[i % s.c()] += chunk.iter().map(|v| v.f64()).sum::<f64>();
    }
    Tensor::new(Shape::new(1, s.c(), 1, 1), db.into_iter().map(T::of).collect()).unwrap()
}

pub fn conv_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (ys, win) = conv_shape(x.shape(), w.shape(), stride, pad)?;
    bias_channels(b, ys.c(), "convolution")?;
    let xs = x.shape();
    let ck = xs.c() * win.k * win.k;
    let p = ys.plane();
    let mut y = Tensor::zeros(ys);
    let mut col = vec![T::zero(); ck * p];
    for n in 0..xs.n() {
        im2col(x.sample(n), xs.c(), xs.h(), xs.w(), win, ys.h(), ys.w(), &mut col);
        let out = &mut y.data_mut()[n * ys.sample_len()..(n + 1) * ys.sample_len()];
        T::gemm(ys.c(), ck, p, w.data(), false, &col, false, out, false);
    }
    add_bias(&mut y, b);
    Ok(y)
}

/// Gradients of a convolution: `(dx, dw, db)`; `dx` only when requested.
pub fn conv_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (ys, win) = conv_shape(x.shape(), w.shape(), stride, pad)?;
    assert_eq!(ys, dy.shape());
    let xs = x.shape();
    let ck = xs.c() * win.k * win.k;
    let p = ys.plane();
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = want_dx.then(|| Tensor::zeros(xs));
    let mut col = vec![T::zero(); ck * p];
    for n in 0..xs.n() {
        let g = dy.sample(n);
        im2col(x.sample(n), xs.c(), xs.h(), xs.w(), win, ys.h(), ys.w(), &mut col);
        T::gemm(ys.c(), p, ck, g, false, &col, true, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            T::gemm(ck, ys.c(), p, w.data(), true, g, false, &mut col, false);
            let out = &mut dx.data_mut()[n * xs.sample_len()..(n + 1) * xs.sample_len()];
            col2im(&col, xs.c(), xs.h(), xs.w(), win, ys.h(), ys.w(), out);
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}

pub fn deconv_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (ys, win) = deconv_shape(x.shape(), w.shape(), stride, pad)?;
    bias_channels(b, ys.c(), "deconvolution")?;
    let xs = x.shape();
    let ck = ys.c() * win.k * win.k;
    let p = xs.plane();
    let mut y = Tensor::zeros(ys);
    let mut col = vec![T::zero(); ck * p];
    for n in 0..xs.n() {
        T::gemm(ck, xs.c(), p, w.data(), true, x.sample(n), false, &mut col, false);
        let out = &mut y.data_mut()[n * ys.sample_len()..(n + 1) * ys.sample_len()];
        col2im(&col, ys.c(), ys.h(), ys.w(), win, xs.h(), xs.w(), out);
    }
    add_bias(&mut y, b);
    Ok(y)
}

/// Gradients of a transposed convolution: `(dx, dw, db)`.
///
/// `dx` is the forward convolution of `dy` with the same weight tensor read
/// as `[Cout = Cin, Cin = Cout, k, k]`.
pub fn deconv_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (ys, win) = deconv_shape(x.shape(), w.shape(), stride, pad)?;
    assert_eq!(ys, dy.shape());
    let xs = x.shape();
    let ck = ys.c() * win.k * win.k;
    let p = xs.plane();
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = want_dx.then(|| Tensor::zeros(xs));
    let mut col = vec![T::zero(); ck * p];
    for n in 0..xs.n() {
        im2col(dy.sample(n), ys.c(), ys.h(), ys.w(), win, xs.h(), xs.w(), &mut col);
        T::gemm(xs.c(), p, ck, x.sample(n), false, &col, true, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            let out = &mut dx.data_mut()[n * xs.sample_len()..(n + 1) * xs.sample_len()];
            T::gemm(xs.c(), ck, p, w.data(), false, &col, false, out, false);
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape, scale: f64) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_| {
            i += 1.0;
            (i * scale).sin()
        })
    }

    /// Direct-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (ys, win) = conv_shape(x.shape(), w.shape(), stride, pad).unwrap();
        Tensor::from_fn(ys, |[n, co, oy, ox]| {
            let mut acc = 0.0;
            for ci in 0..x.shape().c() {
                for ki in 0..win.k {
                    for kj in 0..win.k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.shape().h() && (ix as usize) < x.shape().w() {
                            acc += x.get([n, ci, iy as usize, ix as usize]) * w.get([co, ci, ki, kj]);
                        }
                    }
                }
            }
            acc
        })
    }

    /// Scatter definition of the transposed convolution.
    fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (ys, win) = deconv_shape(x.shape(), w.shape(), stride, pad).unwrap();
        let mut y = Tensor::zeros(ys);
        let xs = x.shape();
        for n in 0..xs.n() {
            for ci in 0..xs.c() {
                for iy in 0..xs.h() {
                    for ix in 0..xs.w() {
                        for co in 0..ys.c() {
                            for ki in 0..win.k {
                                for kj in 0..win.k {
                                    let oy = (iy * stride + ki) as isize - pad as isize;
                                    let ox = (ix * stride + kj) as isize - pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < ys.h() && (ox as usize) < ys.w() {
                                        let o = [n, co, oy as usize, ox as usize];
                                        let v = y.get(o) + x.get([n, ci, iy, ix]) * w.get([ci, co, ki, kj]);
                                        y.set(o, v);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, h, w) in [(1, 5, 6), (2, 6, 6), (2, 5, 7)] {
            let x = ramp(Shape::new(2, 3, h, w), 0.7);
            let k = ramp(Shape::new(4, 3, 3, 3), 1.3);
            let y = conv_forward(&x, &k, None, stride, 1).unwrap();
            assert_eq!(y.shape().h(), h.div_ceil(stride));
            assert!(y.max_abs_diff(&naive_conv(&x, &k, stride, 1)) < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_scatter_definition() {
        let x = ramp(Shape::new(2, 3, 3, 4), 0.9);
        let k = ramp(Shape::new(3, 2, 4, 4), 0.4);
        let y = deconv_forward(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 6, 8));
        assert!(y.max_abs_diff(&naive_deconv(&x, &k, 2, 1)) < 1e-12);
    }

    #[test]
    fn conv_and_deconv_are_adjoint() {
        // <conv(x), y> = <x, deconv(y)> for shared weights.
        let x = ramp(Shape::new(1, 2, 8, 6), 0.3);
        let k = ramp(Shape::new(3, 2, 4, 4), 0.8);
        let y = ramp(Shape::new(1, 3, 4, 3), 0.5);
        let cx = conv_forward(&x, &k, None, 2, 1).unwrap();
        let dy = deconv_forward(&y, &k, None, 2, 1).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let k = Tensor::<f32>::zeros(Shape::new(4, 3, 3, 3));
        assert!(matches!(conv_forward(&x, &k, None, 1, 1), Err(Error::Dimension(_))));
        let d = Tensor::<f32>::zeros(Shape::new(3, 2, 4, 4));
        assert!(matches!(deconv_forward(&x, &d, None, 2, 1), Err(Error::Dimension(_))));
    }
}
