//! Uniform weight/activation quantizers with learnable rounding and scales.
//!
//! Weights use `s * clip(floor(w / s) + h(v), n, p)` with a rectified-sigmoid
//! rounding choice `h(v)` and a learnable scale; activations use
//! `s * clip(round(a / s), n, p)` with the LSQ scale gradient. A bit-width of
//! 32 disables quantization entirely: every quantizer becomes the identity.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Stretch parameters of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;
/// Scale floor: returned for all-zero tensors and enforced after every update.
pub const MIN_SCALE: f64 = 1e-8;
/// Magnitude written into `v` when hardening; `h(+-HARD_V)` is exactly 1 or 0.
pub const HARD_V: f64 = 8.0;

pub const COARSE_CANDIDATES: usize = 100;
pub const FINE_CANDIDATES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("unsupported bit-width {0}")]
    BitWidth(u32),
    #[error("rounding variables {v:?} do not match weight {w:?}")]
    ShapeMismatch { v: Vec<usize>, w: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, QuantError>;

/// Bit-width of a quantizer; 32 means "not quantized".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bits(u32);

impl Bits {
    pub const FULL: Bits = Bits(32);

    pub fn new(bits: u32) -> Result<Self> {
        match bits {
            2 | 3 | 4 | 8 | 32 => Ok(Bits(bits)),
            other => Err(QuantError::BitWidth(other)),
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn enabled(self) -> bool {
        self.0 < 32
    }

    /// Integer clip bounds `(n, p)`.
    pub fn bounds(self, signed: bool) -> (i64, i64) {
        let b = self.0.min(62);
        if signed {
            (-(1i64 << (b - 1)), (1i64 << (b - 1)) - 1)
        } else {
            (0, (1i64 << b) - 1)
        }
    }
}

impl TryFrom<u32> for Bits {
    type Error = QuantError;
    fn try_from(v: u32) -> Result<Self> {
        Bits::new(v)
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.0
    }
}

fn bounds_as<S: Scalar>(bits: Bits, signed: bool) -> (S, S) {
    let (n, p) = bits.bounds(signed);
    (S::lit(n as f64), S::lit(p as f64))
}

fn ensure_positive<S: Scalar>(scale: &Tensor<S>) -> Result<()> {
    match scale.data().iter().find(|s| !(**s > S::zero())) {
        Some(s) => Err(QuantError::NonPositiveScale(s.as_f64())),
        None => Ok(()),
    }
}

/// Per-weight-tensor quantization state.
#[derive(Debug, Clone)]
pub struct QuantParams<S: Scalar> {
    /// Shape `[1]` (per tensor) or `[O, 1, ...]` (per output channel), broadcast
    /// against the weight.
    pub scale: Tensor<S>,
    /// Soft rounding variables, shaped like the weight.
    pub v: Tensor<S>,
    pub bits: Bits,
    pub signed: bool,
    pub hardened: bool,
}

impl<S: Scalar> QuantParams<S> {
    /// Scale from [`init_scale_search`] (per tensor or per output channel) and
    /// `v` chosen so that `h(v)` equals the fractional residual `w/s - floor(w/s)`.
    pub fn init(w: &Tensor<S>, bits: Bits, signed: bool, per_channel: bool) -> Result<Self> {
        let scale = if !bits.enabled() {
            Tensor::ones(&[1])
        } else if per_channel {
            let out = w.shape()[0];
            let inner = w.numel() / out.max(1);
            let scales = (0..out)
                .map(|o| {
                    let slice = Tensor::raw(vec![inner], w.data()[o * inner..(o + 1) * inner].to_vec());
                    init_scale_search(&slice, bits, signed)
                })
                .collect::<Result<Vec<S>>>()?;
            let mut shape = vec![1; w.ndim()];
            shape[0] = out;
            Tensor::raw(shape, scales)
        } else {
            Tensor::raw(vec![1], vec![init_scale_search(w, bits, signed)?])
        };
        let v = init_rounding_vars(w, &scale);
        Ok(Self {
            scale,
            v,
            bits,
            signed,
            hardened: false,
        })
    }

    pub fn bounds(&self) -> (i64, i64) {
        self.bits.bounds(self.signed)
    }

    /// Snaps `h(v)` to `{0, 1}` by thresholding at one half.
    pub fn harden(&mut self) {
        let h = h_rectified_sigmoid(&self.v.detach());
        let data = h
            .data()
            .iter()
            .map(|&x| if x >= S::lit(0.5) { S::lit(HARD_V) } else { S::lit(-HARD_V) })
            .collect();
        self.v = Tensor::raw(self.v.shape().to_vec(), data);
        self.hardened = true;
    }

    /// Trainable tensors (scale, then rounding variables).
    pub fn tensors(&self) -> [&Tensor<S>; 2] {
        [&self.scale, &self.v]
    }
}

fn init_rounding_vars<S: Scalar>(w: &Tensor<S>, scale: &Tensor<S>) -> Tensor<S> {
    let ratio = w.div(&scale.detach());
    let (zeta, gamma) = (S::lit(ZETA), S::lit(GAMMA));
    let eps = S::lit(1e-6);
    let data = ratio
        .data()
        .iter()
        .map(|&r| {
            let rest = r - r.floor();
            let sig = ((rest - gamma) / (zeta - gamma)).max(eps).min(S::one() - eps);
            (sig / (S::one() - sig)).ln()
        })
        .collect();
    Tensor::raw(w.shape().to_vec(), data)
}

/// Activation quantizer state.
#[derive(Debug, Clone)]
pub struct ActQuantState<S: Scalar> {
    /// Shape `[1]`.
    pub scale: Tensor<S>,
    pub bits: Bits,
    pub signed: bool,
}

impl<S: Scalar> ActQuantState<S> {
    /// Scale initialized by MSE search over observed activations.
    pub fn init(samples: &Tensor<S>, bits: Bits, signed: bool) -> Result<Self> {
        let s = if bits.enabled() {
            init_scale_search(samples, bits, signed)?
        } else {
            S::one()
        };
        Ok(Self {
            scale: Tensor::raw(vec![1], vec![s]),
            bits,
            signed,
        })
    }

    pub fn disabled() -> Self {
        Self {
            scale: Tensor::ones(&[1]),
            bits: Bits::FULL,
            signed: false,
        }
    }
}

/// Round-to-nearest uniform quantization `s * clip(round(w / s), n, p)`.
pub fn quantize_uniform<S: Scalar>(w: &Tensor<S>, scale: &Tensor<S>, bits: Bits, signed: bool) -> Result<Tensor<S>> {
    if !bits.enabled() {
        return Ok(w.clone());
    }
    ensure_positive(scale)?;
    let (n, p) = bounds_as::<S>(bits, signed);
    Ok(w.div(scale).clamp(n, p).round_ste().mul(scale))
}

/// Rectified sigmoid `clip(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)`.
pub fn h_rectified_sigmoid<S: Scalar>(v: &Tensor<S>) -> Tensor<S> {
    v.sigmoid()
        .mul_scalar(S::lit(ZETA - GAMMA))
        .add_scalar(S::lit(GAMMA))
        .clamp(S::zero(), S::one())
}

/// Learned rounding `s * clip(floor(w / s) + h(v), n, p)`.
///
/// Differentiable in both `s` and `v`; the floor passes gradients straight
/// through, so the scale gradient inside the range is `floor(w/s) + h(v) - w/s`.
pub fn quantize_learned<S: Scalar>(w: &Tensor<S>, q: &QuantParams<S>) -> Result<Tensor<S>> {
    if !q.bits.enabled() {
        return Ok(w.clone());
    }
    if q.v.shape() != w.shape() {
        return Err(QuantError::ShapeMismatch {
            v: q.v.shape().to_vec(),
            w: w.shape().to_vec(),
        });
    }
    ensure_positive(&q.scale)?;
    let (n, p) = bounds_as::<S>(q.bits, q.signed);
    let h = h_rectified_sigmoid(&q.v);
    Ok(w.div(&q.scale).floor_ste().add(&h).clamp(n, p).mul(&q.scale))
}

/// `sum(1 - |2 h(v) - 1|^beta)`: zero exactly when every `h(v)` is 0 or 1.
pub fn rounding_regularizer<S: Scalar>(v: &Tensor<S>, beta: S) -> Tensor<S> {
    let centered = h_rectified_sigmoid(v).mul_scalar(S::lit(2.0)).add_scalar(-S::one()).abs();
    centered.powf(beta).neg().add_scalar(S::one()).sum()
}

/// LSQ activation quantizer. The forward pass equals [`quantize_uniform`];
/// the scale gradient is `round(a/s) - a/s` inside the range and `n`/`p`
/// outside, multiplied by `1 / sqrt(numel(a) * p)`.
pub fn lsq_quantize_act<S: Scalar>(a: &Tensor<S>, st: &ActQuantState<S>) -> Result<Tensor<S>> {
    lsq_quantize_act_with(a, st, true)
}

/// As [`lsq_quantize_act`], optionally without the gradient scaling factor.
pub fn lsq_quantize_act_with<S: Scalar>(a: &Tensor<S>, st: &ActQuantState<S>, scale_grad: bool) -> Result<Tensor<S>> {
    if !st.bits.enabled() {
        return Ok(a.clone());
    }
    ensure_positive(&st.scale)?;
    let (n, p) = bounds_as::<S>(st.bits, st.signed);
    let s = if scale_grad {
        let g = S::one() / (S::lit(a.numel() as f64) * p).sqrt();
        st.scale.scale_grad(g)
    } else {
        st.scale.clone()
    };
    Ok(a.div(&s).clamp(n, p).round_ste().mul(&s))
}

/// Mean squared error of round-to-nearest quantization at scale `s`.
pub fn quant_mse<S: Scalar>(w: &[S], s: S, bits: Bits, signed: bool) -> S {
    let (n, p) = bounds_as::<S>(bits, signed);
    let total: S = w
        .iter()
        .map(|&x| {
            let q = (x / s).max(n).min(p).round() * s;
            (x - q) * (x - q)
        })
        .sum();
    total / S::lit(w.len().max(1) as f64)
}

/// Candidate scales examined by [`init_scale_search`], in evaluation order.
///
/// The reference scale maps the extreme weights onto the clip bounds:
/// `max(max(w) / p, min(w) / n)` (only the first term when unsigned). The
/// coarse grid spans `[0.5, 1.2]` times that reference with
/// [`COARSE_CANDIDATES`] points, the reference itself is evaluated, and a fine
/// grid of [`FINE_CANDIDATES`] points spans one coarse step on either side of
/// the best coarse candidate.
pub fn scale_candidates<S: Scalar>(w: &[S], bits: Bits, signed: bool) -> Vec<S> {
    let (n, p) = bounds_as::<S>(bits, signed);
    let hi = w.iter().fold(S::zero(), |m, &x| m.max(x));
    let lo = w.iter().fold(S::zero(), |m, &x| m.min(x));
    let mut reference = hi / p;
    if signed {
        reference = reference.max(lo / n);
    } else {
        reference = reference.max(-lo / p);
    }
    if !(reference > S::zero()) {
        return Vec::new();
    }
    let start = reference * S::lit(0.5);
    let stop = reference * S::lit(1.2);
    let step = (stop - start) / S::lit((COARSE_CANDIDATES - 1) as f64);
    let mut cands: Vec<S> = (0..COARSE_CANDIDATES)
        .map(|i| start + step * S::lit(i as f64))
        .collect();
    cands.push(reference);
    let best = argmin_scale(w, &cands, bits, signed);
    let fine_lo = (best - step).max(S::lit(MIN_SCALE));
    let fine_step = (best + step - fine_lo) / S::lit((FINE_CANDIDATES - 1) as f64);
    cands.extend((0..FINE_CANDIDATES).map(|i| fine_lo + fine_step * S::lit(i as f64)));
    cands
}

fn argmin_scale<S: Scalar>(w: &[S], cands: &[S], bits: Bits, signed: bool) -> S {
    let mut best = cands[0];
    let mut best_err = quant_mse(w, best, bits, signed);
    for &c in &cands[1..] {
        let e = quant_mse(w, c, bits, signed);
        if e < best_err {
            best = c;
            best_err = e;
        }
    }
    best
}

/// MSE-optimal scale over a coarse-to-fine grid. All-zero input yields
/// [`MIN_SCALE`].
pub fn init_scale_search<S: Scalar>(w: &Tensor<S>, bits: Bits, signed: bool) -> Result<S> {
    if w.numel() == 0 {
        return Err(QuantError::Tensor(TensorError::Invalid("empty tensor".into())));
    }
    if !bits.enabled() {
        return Ok(S::one());
    }
    let cands = scale_candidates(w.data(), bits, signed);
    if cands.is_empty() {
        return Ok(S::lit(MIN_SCALE));
    }
    Ok(argmin_scale(w.data(), &cands, bits, signed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grad};

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    fn params(w: &Tensor<f64>, s: f64, h: f64, bits: u32) -> QuantParams<f64> {
        // invert h for the stretched sigmoid
        let sig = ((h - GAMMA) / (ZETA - GAMMA)).clamp(1e-12, 1.0 - 1e-12);
        let v = if h <= 0.0 {
            -HARD_V
        } else if h >= 1.0 {
            HARD_V
        } else {
            (sig / (1.0 - sig)).ln()
        };
        QuantParams {
            scale: t(&[s]),
            v: Tensor::full(w.shape(), v),
            bits: Bits::new(bits).unwrap(),
            signed: true,
            hardened: false,
        }
    }

    #[test]
    fn bounds_follow_signedness() {
        assert_eq!(Bits::new(3).unwrap().bounds(true), (-4, 3));
        assert_eq!(Bits::new(3).unwrap().bounds(false), (0, 7));
        assert_eq!(Bits::new(8).unwrap().bounds(true), (-128, 127));
        assert!(Bits::new(5).is_err());
    }

    #[test]
    fn uniform_examples() {
        let b3 = Bits::new(3).unwrap();
        let s = t(&[0.1]);
        let out = quantize_uniform(&t(&[0.26, 0.0, 100.0]), &s, b3, true).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - 0.3).abs() < 1e-12);
        assert!(matches!(
            quantize_uniform(&t(&[1.0]), &t(&[0.0]), b3, true),
            Err(QuantError::NonPositiveScale(_))
        ));
    }

    #[test]
    fn learned_examples() {
        let w = t(&[0.26]);
        let down = quantize_learned(&w, &params(&w, 0.1, 0.0, 3)).unwrap();
        assert!((down.item() - 0.2).abs() < 1e-12);
        let up = quantize_learned(&w, &params(&w, 0.1, 1.0, 3)).unwrap();
        assert!((up.item() - 0.3).abs() < 1e-12);
        // exact binary multiples so that w / s is an exact integer
        let lattice = t(&[-0.5, -0.125, 0.0, 0.25, 0.375]);
        let q = quantize_learned(&lattice, &params(&lattice, 0.125, 0.0, 3)).unwrap();
        for (a, b) in q.data().iter().zip(lattice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut bad = params(&w, 0.1, 0.0, 3);
        bad.v = t(&[0.0, 0.0]);
        assert!(matches!(quantize_learned(&w, &bad), Err(QuantError::ShapeMismatch { .. })));
    }

    #[test]
    fn rectified_sigmoid_values() {
        let h = h_rectified_sigmoid(&t(&[0.0, 50.0, -50.0, HARD_V, -HARD_V]));
        assert!((h.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(&h.data()[1..], &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn regularizer_values() {
        assert_eq!(rounding_regularizer(&t(&[HARD_V, HARD_V]), 3.0).item(), 0.0);
        for beta in [1.0, 2.0, 7.5, 18.0] {
            assert!((rounding_regularizer(&t(&[0.0]), beta).item() - 1.0).abs() < 1e-12);
        }
        let mut prev = f64::INFINITY;
        for v in [0.0, 0.3, 0.8, 1.5, 2.2] {
            let r = rounding_regularizer(&t(&[v]), 4.0).item();
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn lsq_forward_matches_uniform_and_ste_passes() {
        let st = ActQuantState {
            scale: t(&[0.25]),
            bits: Bits::new(2).unwrap(),
            signed: false,
        };
        let a = t(&[0.1, 0.3, 0.49, 2.0]).requires_grad_(true);
        let q = lsq_quantize_act(&a, &st).unwrap();
        let u = quantize_uniform(&a.detach(), &st.scale, st.bits, false).unwrap();
        assert!(q.bit_eq(&u));
        let g = grad(&q.sum(), &[a.clone()], false).unwrap();
        assert_eq!(g.values[0].data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn lsq_scale_gradient_matches_surrogate_fd() {
        let a = t(&[0.13, 0.31, 0.52, 0.9, 3.0]);
        let s0 = 0.2;
        let bits = Bits::new(3).unwrap();
        let st = ActQuantState {
            scale: t(&[s0]).requires_grad_(true),
            bits,
            signed: false,
        };
        let out = lsq_quantize_act_with(&a, &st, false).unwrap();
        let g = grad(&out.sum(), &[st.scale.clone()], false).unwrap().values[0].item();
        // surrogate: round replaced by identity plus the residual frozen at s0
        let resid: Vec<f64> = a.data().iter().map(|&x| (x / s0).clamp(0.0, 7.0).round() - (x / s0).clamp(0.0, 7.0)).collect();
        let fd = finite_diff_grad(
            |p| {
                let s = p[0].item();
                a.data()
                    .iter()
                    .zip(&resid)
                    .map(|(&x, &r)| s * ((x / s).clamp(0.0, 7.0) + r))
                    .sum()
            },
            &[t(&[s0])],
            1e-6,
        )
        .unwrap()[0]
            .item();
        assert!((g - fd).abs() < 1e-5, "{g} vs {fd}");
        let expected: f64 = a
            .data()
            .iter()
            .map(|&x| {
                let r = x / s0;
                if r >= 7.0 { 7.0 } else { r.round() - r }
            })
            .sum();
        assert!((g - expected).abs() < 1e-12);
    }

    #[test]
    fn init_search_recovers_lattice_scale() {
        let w = t(&[-0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3]);
        let b3 = Bits::new(3).unwrap();
        let s = init_scale_search(&w, b3, true).unwrap();
        assert!((s - 0.1).abs() < 1e-15);
        assert!(quant_mse(w.data(), s, b3, true) < 1e-30);
        let z = t(&[0.0; 5]);
        assert_eq!(init_scale_search(&z, b3, true).unwrap(), MIN_SCALE);
    }

    #[test]
    fn init_search_beats_every_candidate() {
        let w: Vec<f64> = (0..200).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0).powi(3)).collect();
        for bits in [2, 3, 4, 8] {
            let b = Bits::new(bits).unwrap();
            for signed in [true, false] {
                let s = init_scale_search(&t(&w), b, signed).unwrap();
                let e = quant_mse(&w, s, b, signed);
                for c in scale_candidates(&w, b, signed) {
                    assert!(e <= quant_mse(&w, c, b, signed));
                }
            }
        }
    }

    #[test]
    fn hardening_snaps_to_nearest() {
        let w = t(&[0.26, 0.24, -0.17, 0.05]);
        let mut q = QuantParams::init(&w, Bits::new(4).unwrap(), true, false).unwrap();
        let soft = quantize_learned(&w, &q).unwrap();
        // soft initialization reproduces the weights inside the clip range
        assert!(soft.max_abs_diff(&w) < 1e-5);
        q.harden();
        let hard = quantize_learned(&w, &q).unwrap();
        let near = quantize_uniform(&w, &q.scale, q.bits, true).unwrap();
        assert!(hard.max_abs_diff(&near) < 1e-12);
    }

    #[test]
    fn disabled_bits_are_identity() {
        let w = t(&[0.123, -4.5]);
        let q = QuantParams::init(&w, Bits::FULL, true, false).unwrap();
        assert!(quantize_learned(&w, &q).unwrap().bit_eq(&w));
        assert!(lsq_quantize_act(&w, &ActQuantState::disabled()).unwrap().bit_eq(&w));
    }

    #[test]
    fn per_channel_scales() {
        let w = Tensor::<f64>::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 1.0, -2.0, 3.0]).unwrap();
        let q = QuantParams::init(&w, Bits::new(4).unwrap(), true, true).unwrap();
        assert_eq!(q.scale.shape(), &[2, 1]);
        assert!(q.scale.data()[1] > 5.0 * q.scale.data()[0]);
        let out = quantize_learned(&w, &q).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
    }
}
