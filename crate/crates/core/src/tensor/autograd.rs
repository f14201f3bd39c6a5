use std::collections::{HashMap, HashSet};

use log::warn;

use super::{GradModeGuard, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Grads<S: Scalar> {
    /// One gradient per requested parameter, in request order.
    pub values: Vec<Tensor<S>>,
    /// Indices of parameters the loss does not depend on; their entries in
    /// `values` are zero tensors.
    pub unreached: Vec<usize>,
    /// Whether the sweep recorded its own graph (`create_graph`).
    pub retained: bool,
}

impl<S: Scalar> Grads<S> {
    pub fn into_values(self) -> Vec<Tensor<S>> {
        self.values
    }
}

/// Collects every tracked ancestor of `root`, sorted by creation order.
fn tracked_ancestors<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut nodes = Vec::new();
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || !seen.insert(t.id()) {
            continue;
        }
        if let Some(gf) = t.grad_fn() {
            stack.extend(gf.parents.iter().cloned());
        }
        nodes.push(t);
    }
    nodes.sort_by_key(Tensor::id);
    nodes
}

/// Gradients of a scalar `loss` with respect to each of `params`.
///
/// With `create_graph` the backward pass is itself recorded, so the returned
/// gradients can be differentiated again. Parameters that the loss does not
/// reach get zero gradients and are listed in [`Grads::unreached`].
pub fn grad<S: Scalar>(loss: &Tensor<S>, params: &[Tensor<S>], create_graph: bool) -> Result<Grads<S>> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let nodes = tracked_ancestors(loss);
    let param_ids: HashSet<u64> = params.iter().map(Tensor::id).collect();

    // A node is relevant when some requested parameter is among its ancestors.
    let mut relevant: HashSet<u64> = HashSet::new();
    for n in &nodes {
        let hit = param_ids.contains(&n.id())
            || n.grad_fn()
                .is_some_and(|gf| gf.parents.iter().any(|p| relevant.contains(&p.id())));
        if hit {
            relevant.insert(n.id());
        }
    }

    let _mode = GradModeGuard::new(create_graph);
    let mut cot: HashMap<u64, Tensor<S>> = HashMap::new();
    let mut done: HashMap<u64, Tensor<S>> = HashMap::new();
    if relevant.contains(&loss.id()) {
        cot.insert(loss.id(), Tensor::ones(loss.shape()));
    }
    for node in nodes.iter().rev() {
        let Some(g) = cot.remove(&node.id()) else {
            continue;
        };
        if param_ids.contains(&node.id()) {
            done.insert(node.id(), g.clone());
        }
        let Some(gf) = node.grad_fn() else {
            continue;
        };
        let needs: Vec<bool> = gf.parents.iter().map(|p| relevant.contains(&p.id())).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let pg = (gf.backward)(node, &g, &gf.parents, &needs);
        debug_assert_eq!(pg.len(), gf.parents.len(), "{} backward arity", gf.name);
        for ((parent, need), pgrad) in gf.parents.iter().zip(&needs).zip(pg) {
            if !need {
                continue;
            }
            let Some(pgrad) = pgrad else { continue };
            debug_assert_eq!(pgrad.shape(), parent.shape(), "{} backward shape", gf.name);
            match cot.remove(&parent.id()) {
                Some(acc) => {
                    cot.insert(parent.id(), acc.add(&pgrad));
                }
                None => {
                    cot.insert(parent.id(), pgrad);
                }
            }
        }
    }

    let mut values = Vec::with_capacity(params.len());
    let mut unreached = Vec::new();
    for (i, p) in params.iter().enumerate() {
        match done.get(&p.id()) {
            Some(g) => values.push(g.clone()),
            None => {
                unreached.push(i);
                values.push(Tensor::zeros(p.shape()));
            }
        }
    }
    if !unreached.is_empty() {
        warn!("loss does not depend on parameters {unreached:?}; returning zero gradients");
    }
    Ok(Grads {
        values,
        unreached,
        retained: create_graph,
    })
}

/// Vector-Jacobian product of already computed gradients with respect to
/// `outer`: the gradient of `sum_i <grads_i, cotangent_i>`.
pub fn vjp<S: Scalar>(grads: &Grads<S>, outer: &[Tensor<S>], cotangent: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
    if !grads.retained {
        return Err(TensorError::GraphNotRetained);
    }
    if grads.values.len() != cotangent.len() {
        return Err(TensorError::Invalid(format!(
            "{} gradients but {} cotangents",
            grads.values.len(),
            cotangent.len()
        )));
    }
    let mut total: Option<Tensor<S>> = None;
    for (g, u) in grads.values.iter().zip(cotangent) {
        if g.shape() != u.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "vjp",
                left: g.shape().to_vec(),
                right: u.shape().to_vec(),
            });
        }
        if !g.requires_grad() {
            continue;
        }
        let term = g.mul(&u.detach()).sum();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    match total {
        Some(t) => Ok(grad(&t, outer, false)?.values),
        None => Ok(outer.iter().map(|p| Tensor::zeros(p.shape())).collect()),
    }
}

/// Mixed second-order product: the derivative of
/// `<d loss / d inner, cotangent>` with respect to `outer`.
pub fn grad_of_grad<S: Scalar>(
    loss: &Tensor<S>,
    inner: &[Tensor<S>],
    outer: &[Tensor<S>],
    cotangent: &[Tensor<S>],
) -> Result<Vec<Tensor<S>>> {
    let g = grad(loss, inner, true)?;
    vjp(&g, outer, cotangent)
}
