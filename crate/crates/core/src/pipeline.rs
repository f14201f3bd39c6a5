//! End-to-end calibration: transformation warm-up, per-block meta and
//! quantization phases, static augmentation baselines, and evaluation.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, LabeledSet};
use crate::losses::{
    loss_block_recon, loss_dp, loss_kl_preserve, loss_margin, loss_mse_preserve, loss_val_kl, LossWeights,
    PreserveKind,
};
use crate::meta::{hypergrad, meta_update_t, require_live, InnerKind, InnerOptState, MetaError, MetaOptState};
use crate::metrics::{MetricsRecord, Phase};
use crate::nets::{argmax_rows, BlockModel, BlockQuant, NetError, QuantConfig, QuantizedModel, Transform, TransformNet, UNetConfig};
use crate::optim::Adam;
use crate::quant::{rounding_regularizer, MIN_SCALE};
use crate::tensor::{grad, no_grad, Tensor, TensorError};

type T = Tensor<f64>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown augmentation strategy {0:?}")]
    UnknownStrategy(String),
    #[error("strategy {0} needs the transformation network; use the meta-augmented pipeline")]
    NeedsTransform(Strategy),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<crate::quant::QuantError> for PipelineError {
    fn from(e: crate::quant::QuantError) -> Self {
        PipelineError::Net(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// How the quantization pool is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    None,
    Flip,
    Rotate,
    Brightness,
    Contrast,
    Mixup,
    Cutmix,
    MetaAug,
    MetaAugMixup,
    MetaAugCutmix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    Mixup,
    Cutmix,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::None,
        Strategy::Flip,
        Strategy::Rotate,
        Strategy::Brightness,
        Strategy::Contrast,
        Strategy::Mixup,
        Strategy::Cutmix,
        Strategy::MetaAug,
        Strategy::MetaAugMixup,
        Strategy::MetaAugCutmix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Flip => "flip",
            Strategy::Rotate => "rotate",
            Strategy::Brightness => "brightness",
            Strategy::Contrast => "contrast",
            Strategy::Mixup => "mixup",
            Strategy::Cutmix => "cutmix",
            Strategy::MetaAug => "metaaug",
            Strategy::MetaAugMixup => "metaaug+mixup",
            Strategy::MetaAugCutmix => "metaaug+cutmix",
        }
    }

    pub fn uses_transform(self) -> bool {
        matches!(self, Strategy::MetaAug | Strategy::MetaAugMixup | Strategy::MetaAugCutmix)
    }

    /// Batch-level mixing applied while sampling quantization batches.
    pub fn mixing(self) -> Option<Mixing> {
        match self {
            Strategy::Mixup | Strategy::MetaAugMixup => Some(Mixing::Mixup),
            Strategy::Cutmix | Strategy::MetaAugCutmix => Some(Mixing::Cutmix),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PipelineError::UnknownStrategy(s.to_string()))
    }
}

impl Serialize for Strategy {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which full-precision features the preservation loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Logits,
    Penultimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
    Acceptance,
}

impl FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "acceptance" => Ok(Preset::Acceptance),
            other => Err(PipelineError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Meta iterations per block.
    pub n_t: usize,
    /// Quantization iterations per block.
    pub n_q: usize,
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub batch_size: usize,
    pub val_batch_size: usize,
    /// Inner learning rate of the unrolled update.
    pub eta: f64,
    /// Outer learning rate of the transformation network.
    pub gamma: f64,
    pub inner: InnerKind,
    pub weights: LossWeights,
    pub features: FeatureSource,
    pub quant: QuantConfig,
    pub unet: UNetConfig,
    /// Adam learning rate of the rounding variables.
    pub rounding_lr: f64,
    /// Adam learning rate of weight and activation scales.
    pub scale_lr: f64,
    pub rounding_weight: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Beta distribution parameter for mixing coefficients.
    pub mix_alpha: f64,
    /// Fixes every mixing coefficient instead of sampling it.
    pub mix_lambda: Option<f64>,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl MetaConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            n_t: 100,
            n_q: 2000,
            warmup_iters: 200,
            warmup_lr: 1e-3,
            batch_size: 32,
            val_batch_size: 32,
            eta: 1e-3,
            gamma: MetaOptState::<f64>::DEFAULT_GAMMA,
            inner: InnerKind::Sgd,
            weights: LossWeights::default(),
            features: FeatureSource::Logits,
            quant: QuantConfig::default(),
            unet: UNetConfig::default(),
            rounding_lr: 1e-2,
            scale_lr: 1e-3,
            rounding_weight: 0.01,
            beta_start: 18.0,
            beta_end: 2.0,
            mix_alpha: 1.0,
            mix_lambda: None,
            seed: 0,
        };
        match p {
            Preset::Desk => base,
            Preset::Paper => Self {
                n_t: 500,
                n_q: 20_000,
                warmup_iters: 500,
                rounding_lr: 1e-3,
                scale_lr: 4e-5,
                ..base
            },
            Preset::Acceptance => Self {
                n_t: 12,
                n_q: 160,
                warmup_iters: 40,
                batch_size: 16,
                val_batch_size: 16,
                unet: UNetConfig {
                    base_width: 4,
                    ..UNetConfig::default()
                },
                gamma: 1e-2,
                rounding_lr: 3e-2,
                scale_lr: 3e-3,
                rounding_weight: 1.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch_size < 2 || self.val_batch_size < 2 {
            return bad("batch sizes must be at least 2".into());
        }
        for (name, v) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("warmup_lr", self.warmup_lr),
            ("rounding_lr", self.rounding_lr),
            ("scale_lr", self.scale_lr),
            ("rounding_weight", self.rounding_weight),
            ("mix_alpha", self.mix_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.beta_start >= self.beta_end && self.beta_end > 0.0) {
            return bad(format!("beta schedule {} -> {} must decrease to a positive value", self.beta_start, self.beta_end));
        }
        if let Some(l) = self.mix_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("mix_lambda must lie in [0, 1], got {l}"));
            }
        }
        self.weights.validate().map_err(PipelineError::Config)
    }
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 32 | index);
    rng
}

const STREAM_WARMUP: u64 = 1;
const STREAM_META: u64 = 2;
const STREAM_QUANT: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

fn batch_indices<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    sample(rng, n, size.min(n)).into_vec()
}

/// Applies `f` under `no_grad` to row chunks and concatenates the outputs.
fn chunked<F>(x: &T, chunk: usize, f: F) -> Result<T>
where
    F: Fn(&T) -> Result<T>,
{
    let n = x.shape()[0];
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    for start in (0..n).step_by(chunk) {
        let len = chunk.min(n - start);
        parts.push(no_grad(|| f(&x.narrow(0, start, len)))?);
    }
    Ok(T::concat(&parts, 0))
}

/// Output of the full-precision blocks `0..=l`.
fn fp_prefix(fp: &BlockModel<f64>, l: usize, x: &T) -> Result<T> {
    let mut h = x.clone();
    for j in 0..=l {
        h = fp.forward_block(j, &h)?;
    }
    Ok(h)
}

/// Logits with block `l` under `q` and full precision after it, starting from
/// the already computed input of block `l`.
fn hybrid_from(qm: &QuantizedModel<f64>, l: usize, q: &BlockQuant<f64>, block_in: &T) -> Result<T> {
    let mut h = qm.forward_block_with(l, block_in, q)?;
    for j in l + 1..qm.num_blocks() {
        h = qm.fp.forward_block(j, &h)?;
    }
    Ok(qm.fp.head_forward(&h))
}

fn fp_features(fp: &BlockModel<f64>, x: &T, src: FeatureSource) -> Result<T> {
    Ok(match src {
        FeatureSource::Logits => fp.forward_model(x)?,
        FeatureSource::Penultimate => fp.features(x)?,
    })
}

// ---------------------------------------------------------------- augmentation

/// `lam * xi + (1 - lam) * xj`.
pub fn augment_mixup(xi: &T, xj: &T, lam: f64) -> T {
    if lam == 1.0 {
        return xi.clone();
    }
    if lam == 0.0 {
        return xj.clone();
    }
    xi.mul_scalar(lam).add(&xj.mul_scalar(1.0 - lam))
}

/// Integer patch of area ratio `1 - lam` inside an `h x w` image, placed
/// uniformly: `(top, left, height, width)`.
pub fn cutmix_patch<R: Rng>(h: usize, w: usize, lam: f64, rng: &mut R) -> (usize, usize, usize, usize) {
    let r = (1.0 - lam).clamp(0.0, 1.0).sqrt();
    let ph = ((h as f64) * r).round() as usize;
    let pw = ((w as f64) * r).round() as usize;
    let top = rng.gen_range(0..=h - ph);
    let left = rng.gen_range(0..=w - pw);
    (top, left, ph, pw)
}

/// Copies a rectangle of area ratio `1 - lam` from `xj` into `xi`. Both are
/// `[C, H, W]` or `[N, C, H, W]`; batches share one rectangle.
pub fn augment_cutmix<R: Rng>(xi: &T, xj: &T, lam: f64, rng: &mut R) -> Result<T> {
    if xi.shape() != xj.shape() || xi.ndim() < 3 {
        return Err(PipelineError::Config(format!(
            "cutmix needs equal image shapes, got {:?} and {:?}",
            xi.shape(),
            xj.shape()
        )));
    }
    let d = xi.ndim();
    let (h, w) = (xi.shape()[d - 2], xi.shape()[d - 1]);
    let (top, left, ph, pw) = cutmix_patch(h, w, lam, rng);
    let mut out = xi.to_vec();
    let src = xj.data();
    for plane in 0..xi.numel() / (h * w) {
        for y in top..top + ph {
            let row = plane * h * w + y * w;
            out[row + left..row + left + pw].copy_from_slice(&src[row + left..row + left + pw]);
        }
    }
    Ok(T::from_slice(xi.shape(), &out)?)
}

/// Per-image map over `[N, C, H, W]` data.
fn map_images(x: &T, mut f: impl FnMut(usize, &[f64], &mut [f64])) -> Result<T> {
    let n = x.shape()[0];
    let m = x.numel() / n.max(1);
    let mut out = vec![0.0; x.numel()];
    for i in 0..n {
        f(i, &x.data()[i * m..(i + 1) * m], &mut out[i * m..(i + 1) * m]);
    }
    Ok(T::from_slice(x.shape(), &out)?)
}

/// The static augmentation of `strategy` applied once to every image, or
/// `None` for strategies that do not add images.
pub fn static_augment<R: Rng>(x: &T, strategy: Strategy, rng: &mut R) -> Result<Option<T>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(PipelineError::Config(format!("augmentation expects [N, C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let out = match strategy {
        Strategy::Flip => map_images(x, |_, src, dst| {
            for p in 0..c * h {
                for j in 0..w {
                    dst[p * w + j] = src[p * w + w - 1 - j];
                }
            }
        })?,
        Strategy::Rotate => {
            if h != w {
                return Err(PipelineError::Config("rotation needs square images".into()));
            }
            let turns: Vec<u8> = (0..s[0]).map(|_| rng.gen_range(1..=3)).collect();
            map_images(x, |i, src, dst| {
                for ch in 0..c {
                    let base = ch * h * w;
                    for y in 0..h {
                        for j in 0..w {
                            let (sy, sx) = match turns[i] {
                                1 => (j, w - 1 - y),
                                2 => (h - 1 - y, w - 1 - j),
                                _ => (h - 1 - j, y),
                            };
                            dst[base + y * w + j] = src[base + sy * w + sx];
                        }
                    }
                }
            })?
        }
        Strategy::Brightness => {
            let deltas: Vec<f64> = (0..s[0]).map(|_| rng.gen_range(-0.25..=0.25)).collect();
            map_images(x, |i, src, dst| {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v + deltas[i]).clamp(0.0, 1.0);
                }
            })?
        }
        Strategy::Contrast => {
            let factors: Vec<f64> = (0..s[0]).map(|_| rng.gen_range(0.5..=1.5)).collect();
            map_images(x, |i, src, dst| {
                let mean = src.iter().sum::<f64>() / src.len() as f64;
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (mean + (v - mean) * factors[i]).clamp(0.0, 1.0);
                }
            })?
        }
        _ => return Ok(None),
    };
    Ok(Some(out))
}

fn mix_batch<R: Rng>(x: &T, mixing: Mixing, cfg: &MetaConfig, rng: &mut R) -> Result<T> {
    let n = x.shape()[0];
    let lam = match cfg.mix_lambda {
        Some(l) => l,
        None if cfg.mix_alpha > 0.0 => Beta::new(cfg.mix_alpha, cfg.mix_alpha)
            .map_err(|e| PipelineError::Config(format!("mix_alpha: {e}")))?
            .sample(rng),
        None => 1.0,
    };
    if lam == 1.0 {
        return Ok(x.clone());
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let partner = x.select_rows(&perm);
    match mixing {
        Mixing::Mixup => Ok(augment_mixup(x, &partner, lam)),
        Mixing::Cutmix => augment_cutmix(x, &partner, lam, rng),
    }
}

// ---------------------------------------------------------------- warm-up

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupReport {
    pub iterations: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Mean `|x - T(x)|` over the calibration images after warm-up.
    pub mean_abs_dev: f64,
}

fn reconstruction_stats<Tr: Transform<f64>>(t: &Tr, s: &T) -> Result<(f64, f64)> {
    let tx = chunked(s, 64, |c| Ok(t.forward(c)?))?;
    let d = s.sub(&tx);
    let n = d.numel() as f64;
    Ok((
        d.data().iter().map(|v| v * v).sum::<f64>() / n,
        d.data().iter().map(|v| v.abs()).sum::<f64>() / n,
    ))
}

/// Trains `t` towards the identity by Adam on the mean squared pixel error.
pub fn warm_up_t<Tr: Transform<f64>>(t: &mut Tr, s: &T, cfg: &MetaConfig) -> Result<WarmupReport> {
    if s.shape()[0] == 0 {
        return Err(PipelineError::Empty("calibration"));
    }
    let (loss_before, dev_before) = reconstruction_stats(t, s)?;
    if cfg.warmup_iters == 0 {
        return Ok(WarmupReport {
            iterations: 0,
            loss_before,
            loss_after: loss_before,
            mean_abs_dev: dev_before,
        });
    }
    let mut rng = stream(cfg.seed, STREAM_WARMUP, 0);
    let mut opt = Adam::new(cfg.warmup_lr);
    for _ in 0..cfg.warmup_iters {
        let idx = batch_indices(&mut rng, s.shape()[0], cfg.batch_size);
        let x = s.select_rows(&idx);
        let params: Vec<T> = t.params().iter().map(|p| p.detach().requires_grad_(true)).collect();
        let loss = x.sub(&t.forward_with(&params, &x)?).square().mean();
        loss.check_finite("warm-up loss")?;
        let g = grad(&loss, &params, false)?;
        t.set_params(opt.step(&params, &g.values));
    }
    let (loss_after, mean_abs_dev) = reconstruction_stats(t, s)?;
    if mean_abs_dev >= 0.05 {
        warn!("transformation warm-up ended with mean absolute deviation {mean_abs_dev:.4}");
    }
    Ok(WarmupReport {
        iterations: cfg.warmup_iters,
        loss_before,
        loss_after,
        mean_abs_dev,
    })
}

// ---------------------------------------------------------------- meta phase

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaPhaseReport {
    /// Outer objective per iteration.
    pub outer: Vec<f64>,
    /// Inner reconstruction loss per iteration.
    pub inner: Vec<f64>,
    pub last_val: f64,
    pub last_margin: f64,
    pub last_preserve: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Means of the first and last tenth (at least one element) of a curve.
pub fn curve_ends(xs: &[f64]) -> (f64, f64) {
    let k = (xs.len() / 10).max(1).min(xs.len());
    (mean(&xs[..k]), mean(&xs[xs.len() - k..]))
}

#[derive(Debug, Clone, Copy, Default)]
struct OuterTerms {
    val: f64,
    margin: f64,
    preserve: f64,
}

/// Margin and preservation terms of the outer objective for the training
/// batch `x` and its transformation `tx`.
fn direct_terms(fp: &BlockModel<f64>, x: &T, fx: &T, lx: &T, tx: &T, cfg: &MetaConfig) -> Result<(T, T)> {
    let w = &cfg.weights;
    let margin = if w.lambda2 > 0.0 {
        loss_margin(x, tx, w.epsilon)?
    } else {
        T::scalar(0.0)
    };
    let preserve = if w.lambda3 > 0.0 {
        match w.preserve_kind {
            PreserveKind::Dp => loss_dp(fx, &fp_features(fp, tx, cfg.features)?)?,
            PreserveKind::Mse => loss_mse_preserve(fx, &fp_features(fp, tx, cfg.features)?)?,
            PreserveKind::Kl => loss_kl_preserve(lx, &fp.forward_model(tx)?)?,
        }
    } else {
        T::scalar(0.0)
    };
    Ok((margin, preserve))
}

/// Inner and outer objectives of one meta-iteration on block `l`, for a
/// training batch `x` and a validation batch `xv`.
pub struct MetaObjective<'a, Tr: Transform<f64>> {
    qm: &'a QuantizedModel<f64>,
    l: usize,
    t: &'a Tr,
    x: &'a T,
    cfg: &'a MetaConfig,
    fx: T,
    lx: T,
    xv_in: T,
    lv_fp: T,
    /// Positions within the block parameters that form the inner variables;
    /// the rest stay at their current values.
    selected: Vec<usize>,
    stash: RefCell<Option<T>>,
    terms: RefCell<OuterTerms>,
}

impl<'a, Tr: Transform<f64>> MetaObjective<'a, Tr> {
    pub fn new(qm: &'a QuantizedModel<f64>, l: usize, t: &'a Tr, x: &'a T, xv: &'a T, cfg: &'a MetaConfig) -> Result<Self> {
        qm.fp.check_block(l)?;
        let fp = &qm.fp;
        let (fx, lx, xv_in, lv_fp) = no_grad(|| -> Result<(T, T, T, T)> {
            let lx = fp.forward_model(x)?;
            let fx = match cfg.features {
                FeatureSource::Logits => lx.clone(),
                FeatureSource::Penultimate => fp.features(x)?,
            };
            Ok((fx, lx, qm.block_input(l, xv)?, fp.forward_model(xv)?))
        })?;
        Ok(Self {
            qm,
            l,
            t,
            x,
            cfg,
            fx,
            lx,
            xv_in,
            lv_fp,
            selected: (0..qm.blocks[l].params().len()).collect(),
            stash: RefCell::new(None),
            terms: RefCell::new(OuterTerms::default()),
        })
    }

    /// Restricts the inner variables to the rounding variables, holding the
    /// scales fixed.
    pub fn rounding_only(mut self) -> Self {
        self.selected = roles(&self.qm.blocks[self.l])
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Rounding)
            .map(|(i, _)| i)
            .collect();
        self
    }

    /// The current values of the inner variables.
    pub fn theta(&self) -> Vec<T> {
        let all = self.qm.blocks[self.l].params();
        self.selected.iter().map(|&i| all[i].clone()).collect()
    }

    fn block_with(&self, th: &[T]) -> BlockQuant<f64> {
        let bq = &self.qm.blocks[self.l];
        let mut all = bq.params();
        let roles = roles(bq);
        for (&i, t) in self.selected.iter().zip(th) {
            all[i] = match roles[i] {
                Role::Scale => t.clamp_min(MIN_SCALE),
                Role::Rounding => t.clone(),
            };
        }
        bq.with_params(&all)
    }

    fn direct(&self, tx: &T) -> Result<T> {
        let w = &self.cfg.weights;
        let (margin, preserve) = direct_terms(&self.qm.fp, self.x, &self.fx, &self.lx, tx, self.cfg)?;
        let mut tm = self.terms.borrow_mut();
        tm.margin = margin.item();
        tm.preserve = preserve.item();
        Ok(margin.mul_scalar(w.lambda2).add(&preserve.mul_scalar(w.lambda3)))
    }

    /// Block reconstruction loss of the block state `th` on `T_tp(x)`.
    pub fn inner(&self, th: &[T], tp: &[T]) -> std::result::Result<T, MetaError> {
        let tx = self.t.forward_with(tp, self.x)?;
        if tp.iter().any(T::requires_grad) {
            require_live(&tx)?;
        }
        *self.stash.borrow_mut() = Some(tx.clone());
        let a_fp = fp_prefix(&self.qm.fp, self.l, &tx).map_err(meta_err)?;
        let a_in = self.qm.block_input(self.l, &tx)?;
        let a_q = self
            .qm
            .forward_block_with(self.l, &a_in, &self.block_with(th))?;
        Ok(loss_block_recon(&a_fp, &a_q)?)
    }

    /// Weighted validation, margin and preservation losses; the transformed
    /// batch is the one from the preceding [`MetaObjective::inner`] call.
    pub fn outer(&self, th_hat: &[T], _tp: &[T]) -> std::result::Result<T, MetaError> {
        let w = &self.cfg.weights;
        let q = self.block_with(th_hat);
        let logits = hybrid_from(self.qm, self.l, &q, &self.xv_in).map_err(meta_err)?;
        let val = loss_val_kl(&self.lv_fp, &logits)?;
        self.terms.borrow_mut().val = val.item();
        let tx = self.stash.borrow().clone().expect("inner loss evaluated first");
        let rest = self.direct(&tx).map_err(meta_err)?;
        Ok(val.mul_scalar(w.lambda1).add(&rest))
    }

    /// Gradient of the outer objective with respect to the transformation
    /// parameters, with the outer and inner values.
    fn gradient(&self, opt: &InnerOptState<f64>) -> Result<(Vec<T>, f64, f64, OuterTerms)> {
        let theta = self.theta();
        let t_params = self.t.params();
        if self.cfg.weights.lambda1 == 0.0 || theta.is_empty() {
            let tp: Vec<T> = t_params.iter().map(|p| p.detach().requires_grad_(true)).collect();
            let tx = self.t.forward_with(&tp, self.x)?;
            let outer = self.direct(&tx)?;
            let g = grad(&outer, &tp, false)?;
            return Ok((g.values, outer.item(), f64::NAN, *self.terms.borrow()));
        }
        let h = hypergrad(&t_params, &theta, |th, tp| self.inner(th, tp), |th, tp| self.outer(th, tp), opt)?;
        Ok((h.grads, h.outer_loss, h.inner_loss, *self.terms.borrow()))
    }
}

fn meta_err(e: PipelineError) -> MetaError {
    match e {
        PipelineError::Meta(m) => m,
        PipelineError::Net(n) => MetaError::Net(n),
        PipelineError::Tensor(t) => MetaError::Tensor(t),
        other => MetaError::Tensor(TensorError::Invalid(other.to_string())),
    }
}

/// `n_t` meta-iterations on block `l`. The quantized model is read only.
pub fn run_meta_phase<Tr: Transform<f64>>(
    qm: &QuantizedModel<f64>,
    l: usize,
    t: &mut Tr,
    calib: &T,
    cfg: &MetaConfig,
) -> Result<MetaPhaseReport> {
    qm.fp.check_block(l)?;
    let n = calib.shape()[0];
    if n < 2 {
        return Err(PipelineError::Empty("calibration"));
    }
    let mut report = MetaPhaseReport::default();
    if cfg.n_t == 0 {
        return Ok(report);
    }
    let mut rng = stream(cfg.seed, STREAM_META, l as u64);
    let opt = InnerOptState::new(cfg.inner, cfg.eta);
    let mut st = MetaOptState::new(cfg.gamma);
    for it in 0..cfg.n_t {
        let x = calib.select_rows(&batch_indices(&mut rng, n, cfg.batch_size));
        let xv = calib.select_rows(&batch_indices(&mut rng, n, cfg.val_batch_size));
        let (g, outer, inner, terms) = MetaObjective::new(qm, l, t, &x, &xv, cfg)?.gradient(&opt)?;
        let next = meta_update_t(&t.params(), &g, &mut st);
        t.set_params(next);
        report.outer.push(outer);
        report.inner.push(inner);
        report.last_val = terms.val;
        report.last_margin = terms.margin;
        report.last_preserve = terms.preserve;
        if it % 10 == 0 {
            log::debug!("block {l} meta {it}: outer {outer:.5} inner {inner:.5}");
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- quant phase

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantPhaseReport {
    pub iterations: usize,
    /// Reconstruction error of block `l` on the calibration images with the
    /// initial scales and nearest rounding, and with the final hardened state.
    pub recon_start: f64,
    pub recon_end: f64,
    /// Error just before hardening.
    pub recon_soft: f64,
    pub loss: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Scale,
    Rounding,
}

fn roles(q: &BlockQuant<f64>) -> Vec<Role> {
    let mut out = Vec::new();
    for _ in q.weights.iter().filter(|w| w.bits.enabled()) {
        out.extend([Role::Scale, Role::Rounding]);
    }
    for a in [&q.act_in, &q.act_mid].into_iter().flatten() {
        if a.bits.enabled() {
            out.push(Role::Scale);
        }
    }
    out
}

/// Block reconstruction error of block `l` with state `q` on `x`.
pub fn block_recon_error(qm: &QuantizedModel<f64>, l: usize, q: &BlockQuant<f64>, x: &T) -> Result<f64> {
    let n = x.shape()[0];
    let mut total = 0.0;
    for start in (0..n).step_by(128) {
        let len = 128.min(n - start);
        let xb = x.narrow(0, start, len);
        let e = no_grad(|| -> Result<f64> {
            let a_fp = fp_prefix(&qm.fp, l, &xb)?;
            let a_q = qm.forward_block_with(l, &qm.block_input(l, &xb)?, q)?;
            Ok(loss_block_recon(&a_fp, &a_q)?.item())
        })?;
        total += e * len as f64;
    }
    Ok(total / n as f64)
}

fn cosine_beta(cfg: &MetaConfig, it: usize, total: usize) -> f64 {
    let frac = if total <= 1 { 1.0 } else { it as f64 / (total - 1) as f64 };
    cfg.beta_end + 0.5 * (cfg.beta_start - cfg.beta_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `n_q` Adam iterations on the scales and rounding variables of block `l`
/// over batches drawn from `pool`; rounding is hardened afterwards.
pub fn run_quant_phase(
    qm: &mut QuantizedModel<f64>,
    l: usize,
    pool: &T,
    calib: &T,
    mixing: Option<Mixing>,
    cfg: &MetaConfig,
) -> Result<QuantPhaseReport> {
    qm.fp.check_block(l)?;
    let mut bq = qm.blocks[l].clone();
    // Reference point: the initial state with nearest rounding.
    let mut nearest = bq.clone();
    nearest.harden();
    let recon_start = block_recon_error(qm, l, &nearest, calib)?;
    let mut report = QuantPhaseReport {
        recon_start,
        recon_end: block_recon_error(qm, l, &bq, calib)?,
        ..Default::default()
    };
    report.recon_soft = report.recon_end;
    let roles = roles(&bq);
    if cfg.n_q == 0 || roles.is_empty() {
        return Ok(report);
    }
    let n = pool.shape()[0];
    if n == 0 {
        return Err(PipelineError::Empty("quantization pool"));
    }
    let (fp_pool, in_pool) = if mixing.is_none() {
        (
            Some(chunked(pool, 128, |c| fp_prefix(&qm.fp, l, c))?),
            Some(chunked(pool, 128, |c| Ok(qm.block_input(l, c)?))?),
        )
    } else {
        (None, None)
    };
    let mut rng = stream(cfg.seed, STREAM_QUANT, l as u64);
    let split = |ps: &[T], r: Role| -> Vec<T> {
        ps.iter().zip(&roles).filter(|(_, &k)| k == r).map(|(p, _)| p.clone()).collect()
    };
    let mut opt_scale = Adam::new(cfg.scale_lr);
    let mut opt_round = Adam::new(cfg.rounding_lr);
    for it in 0..cfg.n_q {
        let idx = batch_indices(&mut rng, n, cfg.batch_size);
        let (a_fp, a_in) = match (&fp_pool, &in_pool, mixing) {
            (Some(f), Some(i), _) => (f.select_rows(&idx), i.select_rows(&idx)),
            (_, _, Some(mx)) => {
                let x = mix_batch(&pool.select_rows(&idx), mx, cfg, &mut rng)?;
                no_grad(|| -> Result<(T, T)> { Ok((fp_prefix(&qm.fp, l, &x)?, qm.block_input(l, &x)?)) })?
            }
            _ => unreachable!("targets are precomputed when no mixing is applied"),
        };
        let params: Vec<T> = bq.params().iter().map(|p| p.detach().requires_grad_(true)).collect();
        let cur = bq.with_params(&params);
        let a_q = qm.forward_block_with(l, &a_in, &cur)?;
        let recon = loss_block_recon(&a_fp, &a_q)?;
        let beta = cosine_beta(cfg, it, cfg.n_q);
        let mut loss = recon.clone();
        for w in cur.weights.iter().filter(|w| w.bits.enabled()) {
            loss = loss.add(&rounding_regularizer(&w.v, beta).mul_scalar(cfg.rounding_weight));
        }
        loss.check_finite("quantization loss")?;
        let g = grad(&loss, &params, false)?.values;
        let mut scales = opt_scale
            .step(&split(&params, Role::Scale), &split(&g, Role::Scale))
            .into_iter()
            .map(|s| s.clamp_min(MIN_SCALE));
        let mut rounding = opt_round
            .step(&split(&params, Role::Rounding), &split(&g, Role::Rounding))
            .into_iter();
        let next: Vec<T> = roles
            .iter()
            .map(|r| match r {
                Role::Scale => scales.next(),
                Role::Rounding => rounding.next(),
            })
            .collect::<Option<_>>()
            .expect("one update per parameter");
        bq = bq.with_params(&next);
        report.loss.push(recon.item());
    }
    report.recon_soft = block_recon_error(qm, l, &bq, calib)?;
    bq.harden();
    report.iterations = cfg.n_q;
    report.recon_end = block_recon_error(qm, l, &bq, calib)?;
    qm.blocks[l] = bq;
    Ok(report)
}

// ---------------------------------------------------------------- full runs

#[derive(Debug, Clone)]
pub struct PtqOutcome {
    pub model: QuantizedModel<f64>,
    pub transform: Option<TransformNet<f64>>,
    pub records: Vec<MetricsRecord>,
    pub meta: Vec<MetaPhaseReport>,
    pub quant: Vec<QuantPhaseReport>,
}

fn materialize<Tr: Transform<f64>>(t: &Tr, s: &T) -> Result<T> {
    chunked(s, 64, |c| Ok(t.forward(c)?))
}

/// Block-wise calibration with the given pool strategy. Transformation-based
/// strategies warm up a [`TransformNet`] and run a meta phase before each
/// block's quantization phase; the pool is then `T(S) ∪ S`. With `n_t = 0`
/// the transformation is never adapted and the pool stays `S`.
pub fn run_ptq(fp: &BlockModel<f64>, calib: &T, cfg: &MetaConfig, strategy: Strategy, run_id: &str) -> Result<PtqOutcome> {
    cfg.validate()?;
    if calib.shape()[0] < 2 {
        return Err(PipelineError::Empty("calibration"));
    }
    let mut qm = QuantizedModel::init(fp, cfg.quant, calib)?;
    let mut records = Vec::new();
    let mut transform = None;
    if strategy.uses_transform() {
        let mut t = TransformNet::new(UNetConfig {
            seed: cfg.unet.seed ^ cfg.seed,
            ..cfg.unet.clone()
        });
        t.check_input(calib)?;
        let wu = warm_up_t(&mut t, calib, cfg)?;
        records.push(
            MetricsRecord::new(run_id, Phase::Warmup, None, wu.iterations)
                .with("loss_before", wu.loss_before)
                .with("loss_after", wu.loss_after)
                .with("mean_abs_dev", wu.mean_abs_dev),
        );
        transform = Some(t);
    }
    let static_pool = match static_augment(calib, strategy, &mut stream(cfg.seed, STREAM_AUGMENT, 0))? {
        Some(aug) => T::concat(&[calib.clone(), aug], 0),
        None => calib.clone(),
    };
    let mut meta_reports = Vec::new();
    let mut quant_reports = Vec::new();
    for l in 0..qm.num_blocks() {
        let pool = match transform.as_mut() {
            Some(t) if cfg.n_t > 0 => {
                let rep = run_meta_phase(&qm, l, t, calib, cfg)?;
                let (first, last) = curve_ends(&rep.outer);
                records.push(
                    MetricsRecord::new(run_id, Phase::Meta, Some(l), cfg.n_t)
                        .with("outer_first", first)
                        .with("outer_last", last)
                        .with("inner_mean", mean(&rep.inner))
                        .with("val", rep.last_val)
                        .with("margin", rep.last_margin)
                        .with("preserve", rep.last_preserve),
                );
                info!("block {l}: meta outer {first:.5} -> {last:.5}");
                meta_reports.push(rep);
                T::concat(&[materialize(t, calib)?, calib.clone()], 0)
            }
            _ => static_pool.clone(),
        };
        let rep = run_quant_phase(&mut qm, l, &pool, calib, strategy.mixing(), cfg)?;
        records.push(
            MetricsRecord::new(run_id, Phase::Quant, Some(l), rep.iterations)
                .with("recon_start", rep.recon_start)
                .with("recon_end", rep.recon_end)
                .with("recon_soft", rep.recon_soft)
                .with("pool_size", pool.shape()[0] as f64),
        );
        info!("block {l}: reconstruction {:.5} -> {:.5}", rep.recon_start, rep.recon_end);
        quant_reports.push(rep);
    }
    Ok(PtqOutcome {
        model: qm,
        transform,
        records,
        meta: meta_reports,
        quant: quant_reports,
    })
}

pub fn run_metaaug_ptq(fp: &BlockModel<f64>, calib: &T, cfg: &MetaConfig, run_id: &str) -> Result<PtqOutcome> {
    run_ptq(fp, calib, cfg, Strategy::MetaAug, run_id)
}

pub fn run_baseline_ptq(
    fp: &BlockModel<f64>,
    calib: &T,
    cfg: &MetaConfig,
    strategy: Strategy,
    run_id: &str,
) -> Result<PtqOutcome> {
    if strategy.uses_transform() {
        return Err(PipelineError::NeedsTransform(strategy));
    }
    run_ptq(fp, calib, cfg, strategy, run_id)
}

// ---------------------------------------------------------------- evaluation

/// Anything producing logits from images.
pub trait Classifier: Sync {
    fn logits(&self, x: &T) -> std::result::Result<T, NetError>;
}

impl Classifier for BlockModel<f64> {
    fn logits(&self, x: &T) -> std::result::Result<T, NetError> {
        self.forward_model(x)
    }
}

impl Classifier for QuantizedModel<f64> {
    fn logits(&self, x: &T) -> std::result::Result<T, NetError> {
        self.forward_model(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_acc: f64,
    pub test_acc: f64,
    /// `train_acc - test_acc`.
    pub gap: f64,
}

/// Worker count from `METAPTQ_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("METAPTQ_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Top-1 accuracy, evaluated over row chunks in parallel.
pub fn accuracy(model: &dyn Classifier, data: &LabeledSet<f64>) -> Result<f64> {
    if data.is_empty() {
        return Err(PipelineError::Empty("evaluation"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(128).collect();
    let count = |chunk: &[usize]| -> Result<usize> {
        let logits = no_grad(|| model.logits(&data.images.select_rows(chunk)))?;
        logits.check_finite("evaluation logits")?;
        Ok(argmax_rows(&logits)
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == data.labels[i])
            .count())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap().unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let hits: Vec<usize> = pool.install(|| chunks.par_iter().map(|c| count(c)).collect::<Result<_>>())?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

pub fn evaluate(model: &dyn Classifier, train: &LabeledSet<f64>, test: &LabeledSet<f64>) -> Result<EvalReport> {
    if train.is_empty() {
        return Err(PipelineError::Empty("train"));
    }
    if test.is_empty() {
        return Err(PipelineError::Empty("test"));
    }
    let train_acc = accuracy(model, train)?;
    let test_acc = accuracy(model, test)?;
    Ok(EvalReport {
        train_acc,
        test_acc,
        gap: train_acc - test_acc,
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub outcome: PtqOutcome,
    pub eval: EvalReport,
}

impl Experiment {
    pub fn records(&self) -> &[MetricsRecord] {
        &self.outcome.records
    }
}

/// Calibrates with `strategy`, then evaluates on the labeled calibration
/// images and the test split, appending an evaluation record.
pub fn run_experiment(
    fp: &BlockModel<f64>,
    data: &Dataset<f64>,
    cfg: &MetaConfig,
    strategy: Strategy,
    run_id: &str,
) -> Result<Experiment> {
    let mut outcome = run_ptq(fp, &data.calib.images, cfg, strategy, run_id)?;
    let eval = evaluate(&outcome.model, &data.calib.labeled(&data.train), &data.test)?;
    outcome.records.push(
        MetricsRecord::new(run_id, Phase::Eval, None, 0)
            .with("train_acc", eval.train_acc)
            .with("test_acc", eval.test_acc)
            .with("gap", eval.gap),
    );
    Ok(Experiment { outcome, eval })
}
