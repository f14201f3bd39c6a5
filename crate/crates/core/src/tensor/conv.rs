//! Convolution through im2col/col2im and nearest-neighbour resampling.
//!
//! `im2col` and `col2im` are linear and adjoint to each other, and so are
//! `upsample2x` and `sum_pool2x`; each one's backward is the other.

use super::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Output extent along one spatial axis.
    pub fn out_extent(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x_shape: &[usize], kh: usize, kw: usize, spec: Conv2dSpec) -> Self {
        assert_eq!(x_shape.len(), 4, "expected [N, C, H, W], got {x_shape:?}");
        let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        assert!(
            h + 2 * spec.pad >= kh && w + 2 * spec.pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
            oh: spec.out_extent(h, kh),
            ow: spec.out_extent(w, kw),
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn visit(&self, mut f: impl FnMut(usize, usize)) {
        let ncols = self.cols();
        let plane = self.oh * self.ow;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for n in 0..self.n {
                        let img = (n * self.c + c) * self.h * self.w;
                        let col_base = row * ncols + n * plane;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let irow = img + iy as usize * self.w;
                            let crow = col_base + oy * self.ow;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    f(crow + ox, irow + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<S: Scalar>(x: &Tensor<S>, g: Geometry) -> Tensor<S> {
    let src = x.data();
    let mut data = vec![S::zero(); g.rows() * g.cols()];
    g.visit(|ci, xi| data[ci] = src[xi]);
    Tensor::from_op("im2col", vec![g.rows(), g.cols()], data, vec![x.clone()], move |_, gr, _, _| {
        vec![Some(col2im(gr, g))]
    })
}

fn col2im<S: Scalar>(col: &Tensor<S>, g: Geometry) -> Tensor<S> {
    let src = col.data();
    let mut data = vec![S::zero(); g.n * g.c * g.h * g.w];
    g.visit(|ci, xi| data[xi] += src[ci]);
    Tensor::from_op(
        "col2im",
        vec![g.n, g.c, g.h, g.w],
        data,
        vec![col.clone()],
        move |_, gr, _, _| vec![Some(im2col(gr, g))],
    )
}

impl<S: Scalar> Tensor<S> {
    /// 2-D cross-correlation of `[N, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor<S>, spec: Conv2dSpec) -> Tensor<S> {
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, kh, kw]");
        assert_eq!(ws[1], self.shape()[1], "conv input channels");
        let g = Geometry::new(self.shape(), ws[2], ws[3], spec);
        let col = im2col(self, g);
        let wm = weight.reshape(&[ws[0], g.rows()]);
        wm.matmul(&col)
            .reshape(&[ws[0], g.n, g.oh, g.ow])
            .permute(&[1, 0, 2, 3])
    }

    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self) -> Tensor<S> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects [N, C, H, W]");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data();
        let mut data = vec![S::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        Tensor::from_op(
            "upsample2x",
            vec![s[0], s[1], 2 * h, 2 * w],
            data,
            vec![self.clone()],
            |_, g, _, _| vec![Some(g.sum_pool2x())],
        )
    }

    /// Sums non-overlapping 2x2 windows (the adjoint of `upsample2x`).
    pub fn sum_pool2x(&self) -> Tensor<S> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "sum_pool2x expects [N, C, H, W]");
        assert!(s[2] % 2 == 0 && s[3] % 2 == 0, "sum_pool2x needs even extents");
        let (planes, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let src = self.data();
        let mut data = vec![S::zero(); planes * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[(p * h + y / 2) * w + x / 2] += src[(p * 2 * h + y) * 2 * w + x];
                }
            }
        }
        Tensor::from_op(
            "sum_pool2x",
            vec![s[0], s[1], h, w],
            data,
            vec![self.clone()],
            |_, g, _, _| vec![Some(g.upsample2x())],
        )
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self) -> Tensor<S> {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool expects [N, C, H, W]");
        let area = S::lit((s[2] * s[3]) as f64);
        self.reshape(&[s[0], s[1], s[2] * s[3]])
            .sum_to(&[s[0], s[1], 1])
            .reshape(&[s[0], s[1]])
            .mul_scalar(S::one() / area)
    }
}
