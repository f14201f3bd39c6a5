use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::BlockModel;
use super::Result;
use crate::data::LabeledSet;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::{grad, no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training stops early once an epoch ends at or above this accuracy.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 3e-3,
            target_accuracy: 0.98,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<S: Scalar> {
    pub model: BlockModel<S>,
    pub epochs_run: usize,
    /// Inference-mode accuracy on the training data at the end.
    pub train_accuracy: f64,
    pub converged: bool,
    pub epoch_losses: Vec<f64>,
}

/// Mean cross-entropy of `logits` `[N, C]` against `labels`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Tensor<S> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut onehot = vec![S::zero(); n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = S::one();
    }
    let onehot = Tensor::raw(vec![n, c], onehot);
    logits
        .log_softmax()
        .mul(&onehot)
        .sum()
        .mul_scalar(-S::one() / S::lit(n as f64))
}

pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy_of<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Inference-mode accuracy, evaluated in chunks.
pub fn model_accuracy<S: Scalar>(model: &BlockModel<S>, data: &LabeledSet<S>) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0usize;
    for chunk in idx.chunks(256) {
        let logits = no_grad(|| model.forward_model(&data.images.select_rows(chunk)))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        hits += argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Minibatch Adam on cross-entropy with batch-statistics normalization.
///
/// Stops early at `target_accuracy`; running out of epochs below it is
/// reported through [`TrainReport::converged`] and a warning.
pub fn train_fp_model<S: Scalar>(
    mut model: BlockModel<S>,
    data: &LabeledSet<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport<S>> {
    if cfg.epochs == 0 || data.is_empty() {
        let train_accuracy = if data.is_empty() { 0.0 } else { model_accuracy(&model, data)? };
        return Ok(TrainReport {
            model,
            epochs_run: 0,
            train_accuracy,
            converged: train_accuracy >= cfg.target_accuracy,
            epoch_losses: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut train_accuracy = 0.0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size.max(2)) {
            let params: Vec<Tensor<S>> = model.params().iter().map(|p| p.requires_grad_(true)).collect();
            model.set_params(&params);
            let x = data.images.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (logits, stats) = model.forward_train(&x)?;
            let loss = cross_entropy(&logits, &labels);
            loss.check_finite("training loss")?;
            let g = grad(&loss, &params, false)?;
            let next = opt.step(&params, &g.values);
            model.set_params(&next);
            model.update_running_stats(&stats);
            total += loss.item().as_f64() * batch.len() as f64;
            hits += argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
        }
        for p in model.params() {
            p.check_finite("model parameters")?;
        }
        epochs_run = epoch + 1;
        let mean = total / data.len() as f64;
        epoch_losses.push(mean);
        info!(
            "fp epoch {epochs_run}: loss {mean:.4}, running accuracy {:.3}",
            hits as f64 / data.len() as f64
        );
        if hits as f64 / data.len() as f64 >= cfg.target_accuracy {
            train_accuracy = model_accuracy(&model, data)?;
            if train_accuracy >= cfg.target_accuracy {
                break;
            }
        }
    }
    if epochs_run == cfg.epochs {
        train_accuracy = model_accuracy(&model, data)?;
    }
    let converged = train_accuracy >= cfg.target_accuracy;
    if !converged {
        warn!(
            "training stopped after {epochs_run} epochs at accuracy {train_accuracy:.3} (target {:.3})",
            cfg.target_accuracy
        );
    }
    Ok(TrainReport {
        model,
        epochs_run,
        train_accuracy,
        converged,
        epoch_losses,
    })
}
