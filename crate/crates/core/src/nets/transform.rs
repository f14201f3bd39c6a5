use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::{NetError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

/// A learnable image-to-image map evaluated with an explicit parameter list,
/// so callers can substitute tracked copies of the parameters.
pub trait Transform<S: Scalar> {
    fn params(&self) -> Vec<Tensor<S>>;

    fn set_params(&mut self, params: Vec<Tensor<S>>);

    fn forward_with(&self, params: &[Tensor<S>], x: &Tensor<S>) -> Result<Tensor<S>>;

    fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_with(&self.params(), x)
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }
}

/// `x -> a * x + b` with scalar `a`, `b`.
#[derive(Debug, Clone)]
pub struct AffineTransform<S: Scalar> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> AffineTransform<S> {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            a: Tensor::full(&[1], S::lit(a)),
            b: Tensor::full(&[1], S::lit(b)),
        }
    }
}

impl<S: Scalar> Transform<S> for AffineTransform<S> {
    fn params(&self) -> Vec<Tensor<S>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn set_params(&mut self, params: Vec<Tensor<S>>) {
        let [a, b]: [Tensor<S>; 2] = params.try_into().expect("affine transform has two parameters");
        self.a = a;
        self.b = b;
    }

    fn forward_with(&self, params: &[Tensor<S>], x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(x.mul(&params[0]).add(&params[1]))
    }
}

/// Per-pixel linear colour map `y = W x + b` over the channel axis.
#[derive(Debug, Clone)]
pub struct ColorTransform<S: Scalar> {
    /// `[C, C, 1, 1]`.
    pub weight: Tensor<S>,
    /// `[C]`.
    pub bias: Tensor<S>,
}

impl<S: Scalar> ColorTransform<S> {
    /// The identity map.
    pub fn identity(channels: usize) -> Self {
        let mut w = vec![S::zero(); channels * channels];
        for c in 0..channels {
            w[c * channels + c] = S::one();
        }
        Self {
            weight: Tensor::from_slice(&[channels, channels, 1, 1], &w).expect("square weight"),
            bias: Tensor::zeros(&[channels]),
        }
    }
}

impl<S: Scalar> Transform<S> for ColorTransform<S> {
    fn params(&self) -> Vec<Tensor<S>> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    fn set_params(&mut self, params: Vec<Tensor<S>>) {
        let [w, b]: [Tensor<S>; 2] = params.try_into().expect("colour transform has two parameters");
        self.weight = w;
        self.bias = b;
    }

    fn forward_with(&self, params: &[Tensor<S>], x: &Tensor<S>) -> Result<Tensor<S>> {
        let c = params[1].numel();
        if x.shape().len() != 4 || x.shape()[1] != c {
            return Err(NetError::Shape(format!("colour transform expects [N, {c}, H, W], got {:?}", x.shape())));
        }
        Ok(x
            .conv2d(&params[0], Conv2dSpec::new(1, 0))
            .add(&params[1].reshape(&[1, c, 1, 1])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub channels: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_width: 16,
            seed: 0,
        }
    }
}

/// Two-level UNet. The decoder predicts a residual in logit space, so the
/// output is `sigmoid(logit(x) + r(x))`, always inside `(0, 1)`.
#[derive(Debug, Clone)]
pub struct TransformNet<S: Scalar> {
    pub cfg: UNetConfig,
    /// Convolutions in execution order; see [`TransformNet::forward_with`].
    pub layers: Vec<Conv2d<S>>,
}

/// Pixels are kept this far from 0 and 1 before taking the logit.
const PIXEL_MARGIN: f64 = 1e-3;

impl<S: Scalar> TransformNet<S> {
    pub const DEPTH: usize = 2;

    pub fn new(cfg: UNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c, w) = (cfg.channels, cfg.base_width);
        let mut conv = |cin, cout, k, stride| Conv2d::new(&mut rng, cin, cout, k, stride, true);
        let layers = vec![
            conv(c, w, 3, 1),
            conv(w, w, 3, 1),
            conv(w, 2 * w, 3, 2),
            conv(2 * w, 2 * w, 3, 1),
            conv(2 * w, 4 * w, 3, 2),
            conv(4 * w, 4 * w, 3, 1),
            conv(4 * w, 2 * w, 3, 1),
            conv(4 * w, 2 * w, 3, 1),
            conv(2 * w, w, 3, 1),
            conv(2 * w, w, 3, 1),
            Conv2d::with_gain(&mut rng, w, c, 1, 1, true, 0.1),
        ];
        Self { cfg, layers }
    }

    pub fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let s = x.shape();
        let k = 1 << Self::DEPTH;
        if s.len() != 4 || s[1] != self.cfg.channels || s[2] % k != 0 || s[3] % k != 0 || s[2] == 0 || s[3] == 0 {
            return Err(NetError::Shape(format!(
                "transform expects [N, {}, H, W] with H, W positive multiples of {k}, got {s:?}",
                self.cfg.channels
            )));
        }
        Ok(())
    }
}

impl<S: Scalar> Transform<S> for TransformNet<S> {
    fn params(&self) -> Vec<Tensor<S>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone().expect("transform convs carry biases")])
            .collect()
    }

    fn set_params(&mut self, params: Vec<Tensor<S>>) {
        assert_eq!(params.len(), 2 * self.layers.len(), "transform parameter count");
        let mut it = params.into_iter();
        for l in &mut self.layers {
            l.weight = it.next().expect("checked");
            l.bias = it.next();
        }
    }

    fn forward_with(&self, params: &[Tensor<S>], x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let conv = |i: usize, h: &Tensor<S>| {
            let l = &self.layers[i];
            h.conv2d(&params[2 * i], l.spec)
                .add(&params[2 * i + 1].reshape(&[1, params[2 * i + 1].numel(), 1, 1]))
        };
        let e0 = conv(1, &conv(0, x).relu()).relu();
        let e1 = conv(3, &conv(2, &e0).relu()).relu();
        let mid = conv(5, &conv(4, &e1).relu()).relu();
        let u1 = conv(6, &mid.upsample2x()).relu();
        let d1 = conv(7, &Tensor::concat(&[u1, e1], 1)).relu();
        let u0 = conv(8, &d1.upsample2x()).relu();
        let d0 = conv(9, &Tensor::concat(&[u0, e0], 1)).relu();
        let r = conv(10, &d0);

        let m = S::lit(PIXEL_MARGIN);
        let xc = x.detach().clamp(m, S::one() - m);
        let logit = xc.div(&xc.neg().add_scalar(S::one())).ln();
        Ok(logit.add(&r).sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_shape_and_range() {
        let t = TransformNet::<f64>::new(UNetConfig {
            base_width: 4,
            ..UNetConfig::default()
        });
        for hw in [8, 32] {
            let x = Tensor::full(&[2, 3, hw, hw], 0.5);
            let y = t.forward(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(t.forward(&Tensor::zeros(&[1, 3, 6, 6])).is_err());
    }
}
