//! Primitive differentiable operations.
//!
//! Each backward rule is written in terms of other primitives, so the set is
//! closed under differentiation: the backward of a backward is again a graph
//! of primitives from this file and `conv.rs`.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{numel_of, Tensor};
use crate::scalar::Scalar;

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Visits every position of `shape` in row-major order together with the
/// matching offset in a buffer laid out with `strides`.
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let inner = shape[nd - 1];
    let istride = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        for j in 0..inner {
            f(out + j, base + j * istride);
        }
        out += inner;
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `small` viewed inside `big`, zero along broadcast axes.
fn aligned_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let nd = big.len();
    assert!(small.len() <= nd, "cannot align {small:?} into {big:?}");
    let own = contiguous_strides(small);
    let mut strides = vec![0; nd];
    for i in 0..small.len() {
        let d = i + nd - small.len();
        if small[i] == big[d] {
            strides[d] = own[i];
        } else {
            assert_eq!(small[i], 1, "cannot align {small:?} into {big:?}");
        }
    }
    strides
}

impl<S: Scalar> Tensor<S> {
    fn map_unary<F, B>(&self, name: &'static str, f: F, backward: B) -> Tensor<S>
    where
        F: Fn(S) -> S,
        B: Fn(&Tensor<S>, &Tensor<S>, &Tensor<S>) -> Tensor<S> + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |out, g, p, _| vec![Some(backward(out, g, &p[0]))],
        )
    }

    fn zip_same<F>(&self, other: &Tensor<S>, f: F) -> Vec<S>
    where
        F: Fn(S, S) -> S,
    {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    /// Broadcasts both operands to a common shape.
    fn broadcast_pair(&self, other: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = broadcast_shapes(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape(), other.shape())
        });
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x + y);
        Tensor::from_op("add", a.shape().to_vec(), data, vec![a, b], |_, g, _, n| {
            vec![n[0].then(|| g.clone()), n[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x - y);
        Tensor::from_op("sub", a.shape().to_vec(), data, vec![a, b], |_, g, _, n| {
            vec![n[0].then(|| g.clone()), n[1].then(|| g.neg())]
        })
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x * y);
        Tensor::from_op("mul", a.shape().to_vec(), data, vec![a, b], |_, g, p, n| {
            vec![n[0].then(|| g.mul(&p[1])), n[1].then(|| g.mul(&p[0]))]
        })
    }

    pub fn div(&self, other: &Tensor<S>) -> Tensor<S> {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x / y);
        Tensor::from_op("div", a.shape().to_vec(), data, vec![a, b], |out, g, p, n| {
            vec![
                n[0].then(|| g.div(&p[1])),
                n[1].then(|| g.mul(out).div(&p[1]).neg()),
            ]
        })
    }

    pub fn neg(&self) -> Tensor<S> {
        self.map_unary("neg", |v| -v, |_, g, _| g.neg())
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        self.map_unary("mul_scalar", move |v| v * c, move |_, g, _| g.mul_scalar(c))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        self.map_unary("add_scalar", move |v| v + c, |_, g, _| g.clone())
    }

    pub fn exp(&self) -> Tensor<S> {
        self.map_unary("exp", S::exp, |out, g, _| g.mul(out))
    }

    pub fn ln(&self) -> Tensor<S> {
        self.map_unary("ln", S::ln, |_, g, x| g.div(x))
    }

    pub fn sqrt(&self) -> Tensor<S> {
        self.map_unary("sqrt", S::sqrt, |out, g, _| g.div(out).mul_scalar(S::lit(0.5)))
    }

    pub fn square(&self) -> Tensor<S> {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.map_unary(
            "sigmoid",
            |v| S::one() / (S::one() + (-v).exp()),
            |out, g, _| g.mul(&out.mul(&out.neg().add_scalar(S::one()))),
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.map_unary("tanh", S::tanh, |out, g, _| {
            g.mul(&out.square().neg().add_scalar(S::one()))
        })
    }

    /// `|x|`; the derivative at zero is taken as zero.
    pub fn abs(&self) -> Tensor<S> {
        self.map_unary("abs", S::abs, |_, g, x| g.mul(&x.sign_const()))
    }

    /// `x^c` for a constant exponent.
    pub fn powf(&self, c: S) -> Tensor<S> {
        self.map_unary(
            "powf",
            move |v| v.powf(c),
            move |_, g, x| {
                if c == S::one() {
                    g.clone()
                } else {
                    g.mul(&x.powf(c - S::one())).mul_scalar(c)
                }
            },
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        self.map_unary(
            "relu",
            |v| if v > S::zero() { v } else { S::zero() },
            |_, g, x| g.mul(&x.mask_const(|v| v > S::zero())),
        )
    }

    /// Clamps to `[lo, hi]`. The gradient is one on the closed interval and
    /// zero strictly outside it.
    pub fn clamp(&self, lo: S, hi: S) -> Tensor<S> {
        self.map_unary(
            "clamp",
            move |v| v.max(lo).min(hi),
            move |_, g, x| g.mul(&x.mask_const(|v| v >= lo && v <= hi)),
        )
    }

    pub fn clamp_min(&self, lo: S) -> Tensor<S> {
        self.map_unary(
            "clamp_min",
            move |v| v.max(lo),
            move |_, g, x| g.mul(&x.mask_const(|v| v >= lo)),
        )
    }

    /// Round half away from zero with a straight-through gradient.
    pub fn round_ste(&self) -> Tensor<S> {
        self.map_unary("round_ste", S::round, |_, g, _| g.clone())
    }

    /// Floor with a straight-through gradient.
    pub fn floor_ste(&self) -> Tensor<S> {
        self.map_unary("floor_ste", S::floor, |_, g, _| g.clone())
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `c`.
    pub fn scale_grad(&self, c: S) -> Tensor<S> {
        self.map_unary("scale_grad", |v| v, move |_, g, _| g.mul_scalar(c))
    }

    /// Elementwise indicator of `pred` as a constant tensor.
    pub fn mask_const(&self, pred: impl Fn(S) -> bool) -> Tensor<S> {
        Tensor::raw(
            self.shape().to_vec(),
            self.data()
                .iter()
                .map(|&v| if pred(v) { S::one() } else { S::zero() })
                .collect(),
        )
    }

    fn sign_const(&self) -> Tensor<S> {
        Tensor::raw(
            self.shape().to_vec(),
            self.data()
                .iter()
                .map(|&v| {
                    if v > S::zero() {
                        S::one()
                    } else if v < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                })
                .collect(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape {:?} -> {shape:?}",
            self.shape()
        );
        let from = self.shape().to_vec();
        Tensor::from_op_shared("reshape", shape.to_vec(), self.data_arc(), vec![self.clone()], move |_, g, _, _| {
            vec![Some(g.reshape(&from))]
        })
    }

    pub fn flatten_from(&self, axis: usize) -> Tensor<S> {
        let mut shape = self.shape()[..axis].to_vec();
        shape.push(self.shape()[axis..].iter().product());
        self.reshape(&shape)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<S> {
        if self.shape() == shape {
            return self.clone();
        }
        let strides = aligned_strides(self.shape(), shape);
        let src = self.data();
        let mut data = vec![S::zero(); numel_of(shape)];
        for_each_offset(shape, &strides, |o, i| data[o] = src[i]);
        let from = self.shape().to_vec();
        Tensor::from_op("broadcast_to", shape.to_vec(), data, vec![self.clone()], move |_, g, _, _| {
            vec![Some(g.sum_to(&from))]
        })
    }

    /// Sums over broadcast axes down to `shape` (the adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor<S> {
        if self.shape() == shape {
            return self.clone();
        }
        let strides = aligned_strides(shape, self.shape());
        let src = self.data();
        let mut data = vec![S::zero(); numel_of(shape)];
        for_each_offset(self.shape(), &strides, |i, o| data[o] += src[i]);
        let from = self.shape().to_vec();
        Tensor::from_op("sum_to", shape.to_vec(), data, vec![self.clone()], move |_, g, _, _| {
            vec![Some(g.broadcast_to(&from))]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<S> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel();
        self.sum().mul_scalar(S::one() / S::lit(n as f64))
    }

    /// Sum over one axis, keeping it with extent one.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor<S> {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<S> {
        assert_eq!(axes.len(), self.ndim(), "permute rank");
        let in_strides = contiguous_strides(self.shape());
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src = self.data();
        let mut data = vec![S::zero(); src.len()];
        for_each_offset(&shape, &strides, |o, i| data[o] = src[i]);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op("permute", shape, data, vec![self.clone()], move |_, g, _, _| {
            vec![Some(g.permute(&inverse))]
        })
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&self) -> Tensor<S> {
        assert_eq!(self.ndim(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let full = shape[axis];
        Tensor::from_op("narrow", out_shape, data, vec![self.clone()], move |_, g, _, _| {
            vec![Some(g.embed(axis, start, full))]
        })
    }

    /// Places this tensor at offset `start` of a zero tensor whose extent
    /// along `axis` is `full` (the adjoint of `narrow`).
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Tensor<S> {
        let shape = self.shape().to_vec();
        let len = shape[axis];
        assert!(start + len <= full, "embed out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![S::zero(); outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = full;
        Tensor::from_op("embed", out_shape, data, vec![self.clone()], move |_, g, _, _| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut shape = parts[0].shape().to_vec();
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let mut a = p.shape().to_vec();
            let mut b = shape.clone();
            a[axis] = 0;
            b[axis] = 0;
            assert_eq!(a, b, "concat shapes differ off-axis");
            extents.push(p.shape()[axis]);
        }
        let full: usize = extents.iter().sum();
        shape[axis] = full;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Tensor::from_op("concat", shape, data, parts.to_vec(), move |_, g, _, n| {
            let mut start = 0;
            extents
                .iter()
                .zip(n)
                .map(|(&e, &need)| {
                    let r = need.then(|| g.narrow(axis, start, e));
                    start += e;
                    r
                })
                .collect()
        })
    }

    /// Matrix product `op(a) * op(b)` with optional transposes of the 2-D operands.
    pub fn matmul_t(&self, other: &Tensor<S>, ta: bool, tb: bool) -> Tensor<S> {
        assert!(self.ndim() == 2 && other.ndim() == 2, "matmul expects matrices");
        let (ar, ac) = (self.shape()[0], self.shape()[1]);
        let (br, bc) = (other.shape()[0], other.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), other.shape());
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let mut data = vec![S::zero(); m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the contiguous operand buffers above and
            // the output is a fresh buffer.
            unsafe {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    self.data().as_ptr(),
                    rsa,
                    csa,
                    other.data().as_ptr(),
                    rsb,
                    csb,
                    S::zero(),
                    data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::from_op("matmul", vec![m, n], data, vec![self.clone(), other.clone()], move |_, g, p, need| {
            let (a, b) = (&p[0], &p[1]);
            let ga = need[0].then(|| {
                if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(b, false, !tb)
                }
            });
            let gb = need[1].then(|| {
                if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        self.matmul_t(other, false, false)
    }

    /// Row-wise log-softmax of a `[rows, classes]` matrix.
    pub fn log_softmax(&self) -> Tensor<S> {
        assert_eq!(self.ndim(), 2, "log_softmax expects [rows, classes]");
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let maxes: Vec<S> = (0..rows)
            .map(|r| {
                self.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .fold(S::neg_infinity(), |m, &v| m.max(v))
            })
            .collect();
        let shift = Tensor::raw(vec![rows, 1], maxes);
        let z = self.sub(&shift);
        let lse = z.exp().sum_to(&[rows, 1]).ln();
        z.sub(&lse)
    }

    pub fn softmax(&self) -> Tensor<S> {
        self.log_softmax().exp()
    }

    /// Gathers rows along the first axis into a new constant tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor<S> {
        let inner: usize = self.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&self.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        Tensor::raw(shape, data)
    }
}

impl<S: Scalar> Add for &Tensor<S> {
    type Output = Tensor<S>;
    fn add(self, rhs: &Tensor<S>) -> Tensor<S> {
        Tensor::add(self, rhs)
    }
}

impl<S: Scalar> Sub for &Tensor<S> {
    type Output = Tensor<S>;
    fn sub(self, rhs: &Tensor<S>) -> Tensor<S> {
        Tensor::sub(self, rhs)
    }
}

impl<S: Scalar> Mul for &Tensor<S> {
    type Output = Tensor<S>;
    fn mul(self, rhs: &Tensor<S>) -> Tensor<S> {
        Tensor::mul(self, rhs)
    }
}

impl<S: Scalar> Div for &Tensor<S> {
    type Output = Tensor<S>;
    fn div(self, rhs: &Tensor<S>) -> Tensor<S> {
        Tensor::div(self, rhs)
    }
}

impl<S: Scalar> Neg for &Tensor<S> {
    type Output = Tensor<S>;
    fn neg(self) -> Tensor<S> {
        Tensor::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let big = b.broadcast_to(&[2, 3]);
        assert_eq!(big.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(big.sum_to(&[3]).data(), &[2.0, 4.0, 6.0]);
        let col = t(&[2, 1], &[1.0, 2.0]);
        assert_eq!(col.broadcast_to(&[2, 2]).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
    }

    #[test]
    fn permute_and_narrow() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.t().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(x.narrow(1, 1, 2).data(), &[2.0, 3.0, 5.0, 6.0]);
        let e = x.narrow(1, 1, 2).embed(1, 1, 3);
        assert_eq!(e.data(), &[0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
        let c = Tensor::concat(&[x.narrow(1, 0, 1), x.narrow(1, 1, 2)], 1);
        assert!(c.bit_eq(&x));
    }

    #[test]
    fn matmul_with_transposes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(a.matmul(&b).data(), &[4.0, 5.0, 10.0, 11.0]);
        let at = a.t();
        assert_eq!(at.matmul_t(&b, true, false).data(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.matmul_t(&b.t(), false, true).data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 1000.0, 1000.0]);
        let p = x.softmax();
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((p.data()[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let x = t(&[4], &[2.6, -2.5, 2.5, 3.0]);
        assert_eq!(x.round_ste().data(), &[3.0, -3.0, 3.0, 3.0]);
        let r = x.round_ste();
        assert!(r.round_ste().bit_eq(&r));
    }
}
