//! Non-differentiable first-order optimizers over parameter lists.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Each call to [`Adam::step`] returns fresh
/// untracked parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &[Tensor<S>], grads: &[Tensor<S>]) -> Vec<Tensor<S>> {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        params
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (p, g))| {
                assert_eq!(p.shape(), g.shape(), "gradient shape");
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(j, (&x, &gj))| {
                        m[j] = b1 * m[j] + (S::one() - b1) * gj;
                        v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                        x - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps)
                    })
                    .collect();
                Tensor::raw(p.shape().to_vec(), data)
            })
            .collect()
    }
}

/// Plain gradient descent with optional momentum.
#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    buf: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            buf: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor<S>], grads: &[Tensor<S>]) -> Vec<Tensor<S>> {
        if self.buf.is_empty() {
            self.buf = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        }
        let (lr, mu) = (S::lit(self.lr), S::lit(self.momentum));
        params
            .iter()
            .zip(grads)
            .zip(&mut self.buf)
            .map(|((p, g), b)| {
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(b.iter_mut())
                    .map(|((&x, &gj), bj)| {
                        *bj = mu * *bj + gj;
                        x - lr * *bj
                    })
                    .collect();
                Tensor::raw(p.shape().to_vec(), data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_has_unit_magnitude() {
        let p = Tensor::<f64>::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let g = Tensor::from_f64(&[2], &[0.3, 0.0]).unwrap();
        let out = Adam::new(1e-2).step(&[p], &[g]);
        assert!((out[0].data()[0] - (1.0 - 1e-2)).abs() < 1e-8);
        assert_eq!(out[0].data()[1], 1.0);
    }

    #[test]
    fn sgd_step() {
        let p = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let g = Tensor::from_f64(&[1], &[2.0]).unwrap();
        let out = Sgd::new(0.1, 0.0).step(&[p], &[g]);
        assert!((out[0].item() - 0.8).abs() < 1e-15);
    }
}
