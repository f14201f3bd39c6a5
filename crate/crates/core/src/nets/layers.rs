use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Tensor};

/// Kaiming-normal initialization with the given fan-in.
pub(crate) fn kaiming<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<S> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| S::lit(normal.sample(rng))).collect())
}

#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    /// `[out, in, k, k]`
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub spec: Conv2dSpec,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        Self::with_gain(rng, cin, cout, k, stride, bias, 1.0)
    }

    pub fn with_gain<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, gain: f64) -> Self {
        Self {
            weight: kaiming(rng, &[cout, cin, k, k], cin * k * k, gain),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            spec: Conv2dSpec::new(stride, k / 2),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Convolution with an explicitly supplied (possibly quantized) weight.
    pub fn forward_with(&self, x: &Tensor<S>, weight: &Tensor<S>) -> Tensor<S> {
        let y = x.conv2d(weight, self.spec);
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[1, b.numel(), 1, 1])),
            None => y,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        self.forward_with(x, &self.weight)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    /// `[out, in]`
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: kaiming(rng, &[fan_out, fan_in], fan_in, 1.0 / 2f64.sqrt()),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![S::zero(); dim * dim];
        for i in 0..dim {
            w[i * dim + i] = S::one();
        }
        Self {
            weight: Tensor::raw(vec![dim, dim], w),
            bias: Tensor::zeros(&[dim]),
        }
    }

    /// `x W^T + b` for `x` of shape `[N, in]`.
    pub fn forward_with(&self, x: &Tensor<S>, weight: &Tensor<S>) -> Tensor<S> {
        x.matmul_t(weight, false, true).add(&self.bias)
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        self.forward_with(x, &self.weight)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Batch statistics observed in a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Per-channel batch normalization over `[N, C, H, W]`.
///
/// In frozen mode the running statistics are used and never updated.
#[derive(Debug, Clone)]
pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn channel_view(t: &Tensor<S>) -> Tensor<S> {
        t.reshape(&[1, t.numel(), 1, 1])
    }

    pub fn forward_frozen(&self, x: &Tensor<S>) -> Tensor<S> {
        let inv_std: Vec<S> = self
            .running_var
            .data()
            .iter()
            .map(|&v| S::one() / (v + S::lit(self.eps)).sqrt())
            .collect();
        let c = inv_std.len();
        let inv_std = Tensor::raw(vec![1, c, 1, 1], inv_std);
        x.sub(&Self::channel_view(&self.running_mean))
            .mul(&inv_std)
            .mul(&Self::channel_view(&self.gamma))
            .add(&Self::channel_view(&self.beta))
    }

    /// Normalizes with batch statistics; returns them for the running update.
    pub fn forward_train(&self, x: &Tensor<S>) -> (Tensor<S>, BnStats<S>) {
        let s = x.shape();
        let c = s[1];
        let count = S::lit((s[0] * s[2] * s[3]) as f64);
        let mean = x.sum_to(&[1, c, 1, 1]).mul_scalar(S::one() / count);
        let centered = x.sub(&mean);
        let var = centered.square().sum_to(&[1, c, 1, 1]).mul_scalar(S::one() / count);
        let y = centered
            .div(&var.add_scalar(S::lit(self.eps)).sqrt())
            .mul(&Self::channel_view(&self.gamma))
            .add(&Self::channel_view(&self.beta));
        let stats = BnStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        (y, stats)
    }

    pub fn update_running(&mut self, stats: &BnStats<S>) {
        let m = S::lit(self.momentum);
        let blend = |old: &Tensor<S>, new: &[S]| {
            Tensor::raw(
                old.shape().to_vec(),
                old.data()
                    .iter()
                    .zip(new)
                    .map(|(&o, &n)| (S::one() - m) * o + m * n)
                    .collect(),
            )
        };
        self.running_mean = blend(&self.running_mean, &stats.mean);
        self.running_var = blend(&self.running_var, &stats.var);
    }

    /// Learnable parameters only (the running statistics are buffers).
    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batchnorm_train_normalizes_and_frozen_uses_running() {
        let x = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        let (y, st) = bn.forward_train(&x);
        assert!((st.mean[0] - 4.0).abs() < 1e-12);
        assert!((st.var[0] - 5.0).abs() < 1e-12);
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        bn.momentum = 1.0;
        bn.update_running(&st);
        let z = bn.forward_frozen(&x);
        assert!(z.max_abs_diff(&y) < 1e-5);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a: Conv2d<f64> = Conv2d::new(&mut ChaCha8Rng::seed_from_u64(3), 3, 4, 3, 1, true);
        let b: Conv2d<f64> = Conv2d::new(&mut ChaCha8Rng::seed_from_u64(3), 3, 4, 3, 1, true);
        assert!(a.weight.bit_eq(&b.weight));
        assert_eq!(a.param_count(), 3 * 4 * 9 + 4);
    }
}
