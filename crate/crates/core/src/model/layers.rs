//! Convolution, transposed convolution and LeakyReLU with hand-written
//! backward passes (im2col + GEMM).

use serde::{Deserialize, Serialize};

use super::tensor::{batch_to_channel_major, channel_major_to_batch, Tensor};
use crate::real::{gemm, MatRef, Real};

/// Sliding-window geometry between a "large" image (conv input /
/// transposed-conv output) and a "small" one (conv output / transposed-conv
/// input).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
}

impl Window {
    fn small_len(&self) -> usize {
        self.small_h * self.small_w
    }
}

/// `x: [B, C, big]` -> `cols: [C*k*k, B*small]`
pub(crate) fn im2col<T: Real>(x: &[T], b: usize, c: usize, g: &Window) -> Vec<T> {
    let sp = g.small_len();
    let ncols = b * sp;
    let mut cols = vec![T::ZERO; c * g.k * g.k * ncols];
    for ci in 0..c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let img = &x[(bi * c + ci) * g.big_h * g.big_w..(bi * c + ci + 1) * g.big_h * g.big_w];
                    for oy in 0..g.small_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.big_h as isize {
                            continue;
                        }
                        let src_row = &img[iy as usize * g.big_w..(iy as usize + 1) * g.big_w];
                        let dst = &mut dst_row[bi * sp + oy * g.small_w..bi * sp + (oy + 1) * g.small_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.big_w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `cols: [C*k*k, B*small]` into
/// `out: [B, C, big]`.
pub(crate) fn col2im<T: Real>(cols: &[T], b: usize, c: usize, g: &Window, out: &mut [T]) {
    let sp = g.small_len();
    let ncols = b * sp;
    for ci in 0..c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let base = (bi * c + ci) * g.big_h * g.big_w;
                    for oy in 0..g.small_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.big_h as isize {
                            continue;
                        }
                        let dst_row = &mut out[base + iy as usize * g.big_w..base + (iy as usize + 1) * g.big_w];
                        let src = &src_row[bi * sp + oy * g.small_w..bi * sp + (oy + 1) * g.small_w];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.big_w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(data: &mut [T], bias: &[T], b: usize, p: usize) {
    let c = bias.len();
    for bi in 0..b {
        for (ci, &bv) in bias.iter().enumerate() {
            for v in &mut data[(bi * c + ci) * p..(bi * c + ci + 1) * p] {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Real>(dout: &Tensor<T>, db: &mut [T]) {
    let p = dout.h * dout.w;
    for bi in 0..dout.n {
        for (ci, g) in db.iter_mut().enumerate() {
            let s: T = dout.data[(bi * dout.c + ci) * p..(bi * dout.c + ci + 1) * p]
                .iter()
                .copied()
                .sum();
            *g += s;
        }
    }
}

/// 2D convolution. `weight` is `[out_c, in_c, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) struct ConvCache<T> {
    cols: Vec<T>,
    window: Window,
    n: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: vec![T::ZERO; out_c * in_c * k * k],
            bias: vec![T::ZERO; out_c],
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let window = Window {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            big_h: x.h,
            big_w: x.w,
            small_h: oh,
            small_w: ow,
        };
        let cols = im2col(&x.data, x.n, x.c, &window);
        let ncols = x.n * oh * ow;
        let kk = self.in_c * self.k * self.k;
        let mut out_cm = vec![T::ZERO; self.out_c * ncols];
        gemm(
            MatRef::new(&self.weight, self.out_c, kk),
            MatRef::new(&cols, kk, ncols),
            T::ZERO,
            &mut out_cm,
        );
        let mut out = channel_major_to_batch(&out_cm, x.n, self.out_c, oh * ow);
        add_bias(&mut out, &self.bias, x.n, oh * ow);
        (
            Tensor {
                n: x.n,
                c: self.out_c,
                h: oh,
                w: ow,
                data: out,
            },
            ConvCache {
                cols,
                window,
                n: x.n,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` (if given) and returns
    /// the input gradient when `need_input` is set.
    pub(crate) fn backward(
        &self,
        cache: &ConvCache<T>,
        dout: &Tensor<T>,
        grads: Option<&mut Conv2d<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let g = &cache.window;
        let ncols = cache.n * g.small_len();
        let kk = self.in_c * self.k * self.k;
        let dout_cm = batch_to_channel_major(&dout.data, cache.n, self.out_c, g.small_len());
        if let Some(grads) = grads {
            gemm(
                MatRef::new(&dout_cm, self.out_c, ncols),
                MatRef::new(&cache.cols, kk, ncols).t(),
                T::ONE,
                &mut grads.weight,
            );
            bias_grad(dout, &mut grads.bias);
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![T::ZERO; kk * ncols];
        gemm(
            MatRef::new(&self.weight, self.out_c, kk).t(),
            MatRef::new(&dout_cm, self.out_c, ncols),
            T::ZERO,
            &mut dcols,
        );
        let mut dx = Tensor::zeros(cache.n, self.in_c, g.big_h, g.big_w);
        col2im(&dcols, cache.n, self.in_c, g, &mut dx.data);
        Some(dx)
    }
}

/// Transposed 2D convolution. `weight` is `[in_c, out_c, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d<T> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) struct ConvTCache<T> {
    x_cm: Vec<T>,
    window: Window,
    n: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn zeros(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvTranspose2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: vec![T::ZERO; in_c * out_c * k * k],
            bias: vec![T::ZERO; out_c],
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.pad,
            (w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvTCache<T>) {
        assert_eq!(x.c, self.in_c, "transposed conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let window = Window {
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            big_h: oh,
            big_w: ow,
            small_h: x.h,
            small_w: x.w,
        };
        let ncols = x.n * x.h * x.w;
        let kk = self.out_c * self.k * self.k;
        let x_cm = batch_to_channel_major(&x.data, x.n, self.in_c, x.h * x.w);
        let mut cols = vec![T::ZERO; kk * ncols];
        gemm(
            MatRef::new(&self.weight, self.in_c, kk).t(),
            MatRef::new(&x_cm, self.in_c, ncols),
            T::ZERO,
            &mut cols,
        );
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        col2im(&cols, x.n, self.out_c, &window, &mut out.data);
        add_bias(&mut out.data, &self.bias, x.n, oh * ow);
        (out, ConvTCache { x_cm, window, n: x.n })
    }

    pub(crate) fn backward(
        &self,
        cache: &ConvTCache<T>,
        dout: &Tensor<T>,
        grads: Option<&mut ConvTranspose2d<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let g = &cache.window;
        let ncols = cache.n * g.small_len();
        let kk = self.out_c * self.k * self.k;
        let dcols = im2col(&dout.data, cache.n, self.out_c, g);
        if let Some(grads) = grads {
            gemm(
                MatRef::new(&cache.x_cm, self.in_c, ncols),
                MatRef::new(&dcols, kk, ncols).t(),
                T::ONE,
                &mut grads.weight,
            );
            bias_grad(dout, &mut grads.bias);
        }
        if !need_input {
            return None;
        }
        let mut dx_cm = vec![T::ZERO; self.in_c * ncols];
        gemm(
            MatRef::new(&self.weight, self.in_c, kk),
            MatRef::new(&dcols, kk, ncols),
            T::ZERO,
            &mut dx_cm,
        );
        Some(Tensor {
            n: cache.n,
            c: self.in_c,
            h: g.small_h,
            w: g.small_w,
            data: channel_major_to_batch(&dx_cm, cache.n, self.in_c, g.small_len()),
        })
    }
}

/// How gradients pass backwards through rectifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpropMode {
    /// Exact gradient.
    #[default]
    Vanilla,
    /// Guided backpropagation: the backward signal is zeroed wherever the
    /// upstream gradient or the forward pre-activation is negative.
    Guided,
}

pub(crate) fn leaky_relu_forward<T: Real>(x: &mut [T], slope: T) {
    if slope == T::ONE {
        return;
    }
    for v in x {
        if *v < T::ZERO {
            *v *= slope;
        }
    }
}

/// `pre` holds the pre-activations. A slope of one makes the unit linear,
/// so there is nothing to rectify and both modes pass gradients through.
pub(crate) fn leaky_relu_backward<T: Real>(pre: &[T], grad: &mut [T], slope: T, mode: BackpropMode) {
    if slope == T::ONE {
        return;
    }
    match mode {
        BackpropMode::Vanilla => {
            for (g, &p) in grad.iter_mut().zip(pre) {
                if !(p > T::ZERO) {
                    *g *= slope;
                }
            }
        }
        BackpropMode::Guided => {
            for (g, &p) in grad.iter_mut().zip(pre) {
                if p < T::ZERO || *g < T::ZERO {
                    *g = T::ZERO;
                } else if p == T::ZERO {
                    *g *= slope;
                }
            }
        }
    }
}

/// Appends x- and y-coordinate channels, each spanning [-1, 1].
pub fn add_coord_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let p = x.h * x.w;
    let lin = |i: usize, n: usize| {
        if n <= 1 {
            T::ZERO
        } else {
            T::from_f64(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
        }
    };
    let mut coords = vec![T::ZERO; 2 * p];
    for r in 0..x.h {
        for c in 0..x.w {
            coords[r * x.w + c] = lin(c, x.w);
            coords[p + r * x.w + c] = lin(r, x.h);
        }
    }
    let mut data = Vec::with_capacity(x.n * (x.c + 2) * p);
    for bi in 0..x.n {
        data.extend_from_slice(x.sample(bi));
        data.extend_from_slice(&coords);
    }
    Tensor {
        n: x.n,
        c: x.c + 2,
        h: x.h,
        w: x.w,
        data,
    }
}

/// Drops the two trailing coordinate channels from a gradient.
pub(crate) fn strip_coord_channels<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.c - 2;
    let p = g.h * g.w;
    let mut data = Vec::with_capacity(g.n * c * p);
    for bi in 0..g.n {
        data.extend_from_slice(&g.sample(bi)[..c * p]);
    }
    Tensor {
        n: g.n,
        c,
        h: g.h,
        w: g.w,
        data,
    }
}
