//! Bi-level optimization: a differentiable inner update of the quantization
//! parameters, the hypergradient of the outer objective with respect to the
//! transformation parameters, and a finite-difference reference for it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::NetError;
use crate::optim::Adam;
use crate::quant::QuantError;
use crate::scalar::Scalar;
use crate::tensor::{finite_diff_coords, grad, no_grad, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("inner optimizer was built without differentiable updates")]
    NotDifferentiable,
    #[error("training batch is not connected to the transformation parameters")]
    DeadGraph,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerKind {
    Sgd,
    Adam,
}

/// State of the single unrolled inner update.
#[derive(Debug, Clone)]
pub struct InnerOptState<S: Scalar> {
    pub kind: InnerKind,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Whether the update is recorded so it can be differentiated.
    pub differentiable: bool,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: i32,
}

impl<S: Scalar> InnerOptState<S> {
    pub fn sgd(eta: f64) -> Self {
        Self::new(InnerKind::Sgd, eta)
    }

    pub fn adam(eta: f64) -> Self {
        Self::new(InnerKind::Adam, eta)
    }

    pub fn new(kind: InnerKind, eta: f64) -> Self {
        Self {
            kind,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            differentiable: true,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn non_differentiable(mut self) -> Self {
        self.differentiable = false;
        self
    }

    /// Adam first moments (empty for SGD or before the first step).
    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    /// `theta - eta * update(grads)`; pure, returning the advanced state.
    /// Stored moments are detached, so only the current gradient is
    /// differentiated through.
    pub fn apply(&self, theta: &[Tensor<S>], grads: &[Tensor<S>]) -> (Vec<Tensor<S>>, Self) {
        let eta = S::lit(self.eta);
        match self.kind {
            InnerKind::Sgd => {
                let out = theta.iter().zip(grads).map(|(p, g)| p.sub(&g.mul_scalar(eta))).collect();
                (out, self.clone())
            }
            InnerKind::Adam => {
                let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
                let t = self.step + 1;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let mut next = self.clone();
                next.step = t;
                next.m.clear();
                next.v.clear();
                let mut out = Vec::with_capacity(theta.len());
                for (i, (p, g)) in theta.iter().zip(grads).enumerate() {
                    let m = g.mul_scalar(S::one() - b1);
                    let v = g.square().mul_scalar(S::one() - b2);
                    let (m, v) = match (self.m.get(i), self.v.get(i)) {
                        (Some(m0), Some(v0)) => (m.add(&m0.mul_scalar(b1)), v.add(&v0.mul_scalar(b2))),
                        _ => (m, v),
                    };
                    let denom = v.mul_scalar(S::one() / c2).sqrt().add_scalar(S::lit(self.eps));
                    out.push(p.sub(&m.mul_scalar(eta / c1).div(&denom)));
                    next.m.push(m.detach());
                    next.v.push(v.detach());
                }
                (out, next)
            }
        }
    }
}

/// One inner update of `theta` on `loss`, recorded when the state is
/// differentiable. Returns the updated parameters and the advanced state.
pub fn inner_step<S: Scalar>(
    theta: &[Tensor<S>],
    loss: &Tensor<S>,
    opt: &InnerOptState<S>,
) -> Result<(Vec<Tensor<S>>, InnerOptState<S>)> {
    let g = grad(loss, theta, opt.differentiable)?;
    Ok(opt.apply(theta, &g.values))
}

/// Fails with [`MetaError::DeadGraph`] unless `batch` was produced by a
/// recorded computation on tracked parameters.
pub fn require_live<S: Scalar>(batch: &Tensor<S>) -> Result<()> {
    if batch.requires_grad() {
        Ok(())
    } else {
        Err(MetaError::DeadGraph)
    }
}

/// Outer Adam state for the transformation parameters.
#[derive(Debug, Clone)]
pub struct MetaOptState<S: Scalar> {
    pub gamma: f64,
    adam: Adam<S>,
}

impl<S: Scalar> MetaOptState<S> {
    pub const DEFAULT_GAMMA: f64 = 5e-6;

    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            adam: Adam::new(gamma),
        }
    }
}

/// One Adam step with learning rate `gamma` on the transformation parameters.
pub fn meta_update_t<S: Scalar>(t_params: &[Tensor<S>], grads: &[Tensor<S>], st: &mut MetaOptState<S>) -> Vec<Tensor<S>> {
    st.adam.lr = st.gamma;
    st.adam.step(t_params, grads)
}

/// Outcome of one differentiated inner step.
#[derive(Debug, Clone)]
pub struct Hypergrad<S: Scalar> {
    /// Gradient of the outer objective with respect to each transformation parameter.
    pub grads: Vec<Tensor<S>>,
    pub inner_loss: f64,
    pub outer_loss: f64,
    /// State after the inner step (moments advanced for Adam).
    pub next_state: InnerOptState<S>,
}

fn tracked<S: Scalar>(ts: &[Tensor<S>]) -> Vec<Tensor<S>> {
    ts.iter().map(|t| t.detach().requires_grad_(true)).collect()
}

/// Gradient of `outer(theta_hat(t), t)` with respect to `t`, where
/// `theta_hat = inner_step(theta, inner(theta, t))`.
///
/// `inner(theta, t)` is the lower-level loss on transformed samples and
/// `outer(theta_hat, t)` the upper-level objective. The whole update is
/// recorded and differentiated, which for SGD equals
/// `-eta * d/dt <grad_theta inner, grad_theta_hat outer>` plus any direct
/// dependence of `outer` on `t`.
pub fn hypergrad<S, FI, FO>(
    t_params: &[Tensor<S>],
    theta: &[Tensor<S>],
    inner: FI,
    outer: FO,
    opt: &InnerOptState<S>,
) -> Result<Hypergrad<S>>
where
    S: Scalar,
    FI: Fn(&[Tensor<S>], &[Tensor<S>]) -> Result<Tensor<S>>,
    FO: Fn(&[Tensor<S>], &[Tensor<S>]) -> Result<Tensor<S>>,
{
    if !opt.differentiable {
        return Err(MetaError::NotDifferentiable);
    }
    let t = tracked(t_params);
    let th = tracked(theta);
    let l_q = inner(&th, &t)?;
    l_q.check_finite("inner loss")?;
    let (theta_hat, next_state) = inner_step(&th, &l_q, opt)?;
    let l_out = outer(&theta_hat, &t)?;
    l_out.check_finite("outer loss")?;
    let g = grad(&l_out, &t, false)?;
    for (i, gi) in g.values.iter().enumerate() {
        gi.check_finite(&format!("hypergradient {i}"))?;
    }
    Ok(Hypergrad {
        grads: g.values,
        inner_loss: l_q.item().as_f64(),
        outer_loss: l_out.item().as_f64(),
        next_state,
    })
}

/// Explicit single-step SGD form: `-eta * vjp(grad_theta inner, t, grad_theta_hat outer)`
/// plus the direct gradient of `outer` in `t`.
pub fn hypergrad_sgd_explicit<S, FI, FO>(
    t_params: &[Tensor<S>],
    theta: &[Tensor<S>],
    inner: FI,
    outer: FO,
    eta: f64,
) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    FI: Fn(&[Tensor<S>], &[Tensor<S>]) -> Result<Tensor<S>>,
    FO: Fn(&[Tensor<S>], &[Tensor<S>]) -> Result<Tensor<S>>,
{
    let t = tracked(t_params);
    let th = tracked(theta);
    let g_in = grad(&inner(&th, &t)?, &th, true)?;
    let theta_hat: Vec<Tensor<S>> = th
        .iter()
        .zip(&g_in.values)
        .map(|(p, g)| p.detach().sub(&g.detach().mul_scalar(S::lit(eta))).requires_grad_(true))
        .collect();
    let mut outer_args = theta_hat.clone();
    outer_args.extend(t.iter().cloned());
    let l_out = outer(&theta_hat, &t)?;
    let g_out = grad(&l_out, &outer_args, false)?.values;
    let (g_hat, g_direct) = g_out.split_at(theta_hat.len());
    let mixed = crate::tensor::vjp(&g_in, &t, g_hat)?;
    Ok(mixed
        .iter()
        .zip(g_direct)
        .map(|(m, d)| d.sub(&m.mul_scalar(S::lit(eta))))
        .collect())
}

/// Central finite differences of `t -> outer(inner_step(theta, inner(theta, t)), t)`
/// at the given `(parameter, coordinate)` pairs (all coordinates when `None`).
pub fn hypergrad_fd_oracle<S, FI, FO>(
    t_params: &[Tensor<S>],
    theta: &[Tensor<S>],
    inner: FI,
    outer: FO,
    opt: &InnerOptState<S>,
    h: S,
    coords: Option<&[(usize, usize)]>,
) -> Result<Vec<S>>
where
    S: Scalar,
    FI: Fn(&[Tensor<S>], &[Tensor<S>]) -> Result<Tensor<S>>,
    FO: Fn(&[Tensor<S>], &[Tensor<S>]) -> Result<Tensor<S>>,
{
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = t_params
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let theta0: Vec<Tensor<S>> = theta.iter().map(Tensor::detach).collect();
    let failure = std::cell::RefCell::new(None);
    let f = |t: &[Tensor<S>]| -> S {
        let eval = || -> Result<S> {
            // Only theta needs tracking; t enters as constants.
            let th = tracked(&theta0);
            let l_q = inner(&th, t)?;
            let (theta_hat, _) = inner_step(&th, &l_q, &opt.clone().non_differentiable())?;
            let out = no_grad(|| outer(&theta_hat, t))?;
            Ok(out.item())
        };
        eval().unwrap_or_else(|e| {
            failure.borrow_mut().get_or_insert(e);
            S::nan()
        })
    };
    let fd = finite_diff_coords(f, t_params, h, coords);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(fd?)
}

/// `count` distinct coordinates drawn uniformly from all parameter entries.
pub fn sample_coords<S: Scalar>(params: &[Tensor<S>], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let flat: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, flat.len(), count.min(flat.len())).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|k| flat[k]).collect()
}

/// Picks the entries of a gradient list at `coords`.
pub fn gather<S: Scalar>(grads: &[Tensor<S>], coords: &[(usize, usize)]) -> Vec<S> {
    coords.iter().map(|&(i, j)| grads[i].data()[j]).collect()
}
