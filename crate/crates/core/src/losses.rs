//! Reconstruction, validation, information-preservation and margin losses.
//!
//! Every loss returns a scalar tensor that stays differentiable in its inputs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Feature norms are floored here inside the cosine kernel.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreserveKind {
    Mse,
    Kl,
    Dp,
}

impl PreserveKind {
    /// Default weight for this preservation loss.
    pub fn default_lambda(self) -> f64 {
        match self {
            PreserveKind::Mse => 1.0,
            PreserveKind::Kl => 5.0,
            PreserveKind::Dp => 3e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub preserve_kind: PreserveKind,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_kind(PreserveKind::Dp)
    }
}

impl LossWeights {
    pub fn for_kind(kind: PreserveKind) -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 0.5,
            lambda3: kind.default_lambda(),
            preserve_kind: kind,
            epsilon: 0.1,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    if a.ndim() == 0 || a.shape()[0] == 0 {
        return Err(TensorError::Invalid(format!("{op}: empty batch")));
    }
    Ok(())
}

fn batch<S: Scalar>(t: &Tensor<S>) -> S {
    S::lit(t.shape()[0] as f64)
}

/// `(1/N) sum ||a - b||^2` over the leading batch axis.
fn batch_sq_dist<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    a.sub(b).square().sum().mul_scalar(S::one() / batch(a))
}

/// Block reconstruction error `(1/N) sum_i ||A_fp,i - A_q,i||^2`.
pub fn loss_block_recon<S: Scalar>(a_fp: &Tensor<S>, a_q: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("loss_block_recon", a_fp, a_q)?;
    Ok(batch_sq_dist(a_fp, a_q))
}

/// `log max(softmax(z), floor)` row-wise.
fn floored_log_softmax<S: Scalar>(z: &Tensor<S>) -> Tensor<S> {
    z.log_softmax().clamp_min(S::lit(PROB_FLOOR.ln()))
}

/// Row-mean KL divergence between the softmax distributions of two logit
/// matrices `[N, C]`.
fn kl_rows<S: Scalar>(op: &'static str, p_logits: &Tensor<S>, q_logits: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape(op, p_logits, q_logits)?;
    if p_logits.ndim() != 2 {
        return Err(TensorError::Invalid(format!("{op}: expected [N, C] logits")));
    }
    let log_p = floored_log_softmax(p_logits);
    let log_q = floored_log_softmax(q_logits);
    Ok(log_p
        .exp()
        .mul(&log_p.sub(&log_q))
        .sum()
        .mul_scalar(S::one() / batch(p_logits)))
}

/// `(1/N) sum KL(softmax(fp) || softmax(q))`.
pub fn loss_val_kl<S: Scalar>(logits_fp: &Tensor<S>, logits_q: &Tensor<S>) -> Result<Tensor<S>> {
    kl_rows("loss_val_kl", logits_fp, logits_q)
}

/// `(1/N) sum KL(softmax(f(x)) || softmax(f(T(x))))`.
pub fn loss_kl_preserve<S: Scalar>(logits_x: &Tensor<S>, logits_tx: &Tensor<S>) -> Result<Tensor<S>> {
    kl_rows("loss_kl_preserve", logits_x, logits_tx)
}

/// `(1/N) sum ||f(x) - f(T(x))||^2`.
pub fn loss_mse_preserve<S: Scalar>(f_x: &Tensor<S>, f_tx: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("loss_mse_preserve", f_x, f_tx)?;
    Ok(batch_sq_dist(f_x, f_tx))
}

/// Rows scaled to unit norm, norms floored at [`NORM_FLOOR`].
fn unit_rows<S: Scalar>(f: &Tensor<S>) -> Tensor<S> {
    let n = f.shape()[0];
    let sq = f.square().sum_to(&[n, 1]);
    f.div(&sq.clamp_min(S::lit(NORM_FLOOR * NORM_FLOOR)).sqrt())
}

fn as_rows<S: Scalar>(f: &Tensor<S>) -> Tensor<S> {
    if f.ndim() == 2 {
        f.clone()
    } else {
        f.reshape(&[f.shape()[0], f.numel() / f.shape()[0].max(1)])
    }
}

/// `K(a, b) = (cos(a, b) + 1) / 2` for two vectors of equal length.
pub fn cosine_kernel<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.numel() != b.numel() || a.numel() == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_kernel",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let rows = Tensor::concat(&[a.reshape(&[1, a.numel()]), b.reshape(&[1, b.numel()])], 0);
    let u = unit_rows(&rows);
    let cos = u.narrow(0, 0, 1).mul(&u.narrow(0, 1, 1)).sum();
    Ok(cos.add_scalar(S::one()).mul_scalar(S::lit(0.5)))
}

/// Pairwise kernel matrix `K[i][j] = K(f_i, f_j)` of the rows of `[N, D]` features.
pub fn kernel_matrix<S: Scalar>(features: &Tensor<S>) -> Tensor<S> {
    let u = unit_rows(&as_rows(features));
    u.matmul_t(&u, false, true).add_scalar(S::one()).mul_scalar(S::lit(0.5))
}

/// `P[i][j] = K(f_i, f_j) / sum_{k != j} K(f_k, f_j)` for `i != j`, zero on the
/// diagonal; every column sums to one.
pub fn cond_prob_matrix<S: Scalar>(features: &Tensor<S>) -> Result<Tensor<S>> {
    let n = features.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(TensorError::Invalid(format!("cond_prob_matrix needs at least 2 samples, got {n}")));
    }
    let mut off = vec![S::one(); n * n];
    for i in 0..n {
        off[i * n + i] = S::zero();
    }
    let k = kernel_matrix(features).mul(&Tensor::raw(vec![n, n], off));
    let col = k.sum_to(&[1, n]).clamp_min(S::lit(PROB_FLOOR));
    Ok(k.div(&col))
}

/// `(1/N) sum_j KL(P_{.|j} || Q_{.|j})` between the conditional probability
/// matrices of original and generated features, paired by row.
pub fn loss_dp<S: Scalar>(features_orig: &Tensor<S>, features_gen: &Tensor<S>) -> Result<Tensor<S>> {
    if features_orig.shape()[0] != features_gen.shape()[0] || features_orig.numel() != features_gen.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_dp",
            left: features_orig.shape().to_vec(),
            right: features_gen.shape().to_vec(),
        });
    }
    let p = cond_prob_matrix(features_orig)?;
    let q = cond_prob_matrix(features_gen)?;
    let floor = S::lit(PROB_FLOOR);
    let (pf, qf) = (p.clamp_min(floor), q.clamp_min(floor));
    Ok(pf.mul(&pf.ln().sub(&qf.ln())).sum().mul_scalar(S::one() / batch(&p)))
}

/// Hinge `(1/N) sum_i max(0, eps - ||x_i - T(x_i)||^2 / M)` with `M` the
/// number of values per sample.
pub fn loss_margin<S: Scalar>(x: &Tensor<S>, tx: &Tensor<S>, epsilon: f64) -> Result<Tensor<S>> {
    same_shape("loss_margin", x, tx)?;
    let n = x.shape()[0];
    let m = x.numel() / n;
    let dist = x
        .sub(tx)
        .square()
        .reshape(&[n, m])
        .sum_to(&[n, 1])
        .mul_scalar(S::one() / S::lit(m as f64));
    Ok(dist
        .neg()
        .add_scalar(S::lit(epsilon))
        .relu()
        .sum()
        .mul_scalar(S::one() / S::lit(n as f64)))
}

/// `lambda1 * val + lambda2 * margin + lambda3 * preserve`.
pub fn loss_transform_total<S: Scalar>(val: &Tensor<S>, margin: &Tensor<S>, preserve: &Tensor<S>, w: &LossWeights) -> Tensor<S> {
    let term = |t: &Tensor<S>, lam: f64| t.mul_scalar(S::lit(lam));
    term(val, w.lambda1)
        .add(&term(margin, w.lambda2))
        .add(&term(preserve, w.lambda3))
}
