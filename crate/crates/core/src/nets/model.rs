use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, BnStats, Conv2d, Linear};
use super::{NetError, Result};
use crate::quant::{lsq_quantize_act, quantize_learned, ActQuantState, QuantParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether a named tensor is trained or only tracked (normalization statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Quantization hooks for one block: a state per weight tensor (in
/// [`Block::weights`] order) and optional activation sites.
#[derive(Debug, Clone)]
pub struct BlockQuant<S: Scalar> {
    pub weights: Vec<QuantParams<S>>,
    /// Quantizer on the block input.
    pub act_in: Option<ActQuantState<S>>,
    /// Quantizer between the two convolutions of a residual block.
    pub act_mid: Option<ActQuantState<S>>,
}

impl<S: Scalar> BlockQuant<S> {
    /// Trainable tensors: `(scale, v)` of each enabled weight quantizer, then
    /// the enabled activation scales.
    pub fn params(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        for q in self.weights.iter().filter(|q| q.bits.enabled()) {
            out.push(q.scale.clone());
            out.push(q.v.clone());
        }
        for a in [&self.act_in, &self.act_mid].into_iter().flatten() {
            if a.bits.enabled() {
                out.push(a.scale.clone());
            }
        }
        out
    }

    /// Copy with the trainable tensors replaced, in [`BlockQuant::params`] order.
    pub fn with_params(&self, params: &[Tensor<S>]) -> Self {
        let mut it = params.iter();
        let mut next = || it.next().expect("parameter list shorter than block state").clone();
        let mut out = self.clone();
        for q in out.weights.iter_mut().filter(|q| q.bits.enabled()) {
            q.scale = next();
            q.v = next();
        }
        for a in [&mut out.act_in, &mut out.act_mid].into_iter().flatten() {
            if a.bits.enabled() {
                a.scale = next();
            }
        }
        out
    }

    pub fn harden(&mut self) {
        for q in &mut self.weights {
            if q.bits.enabled() {
                q.harden();
            }
        }
    }

    pub fn is_hardened(&self) -> bool {
        self.weights.iter().all(|q| q.hardened || !q.bits.enabled())
    }
}

/// Per-call forward options.
#[derive(Default)]
pub(crate) struct Ctx<'a, S: Scalar> {
    /// Collects batch statistics; its presence selects training-mode normalization.
    pub stats: Option<&'a mut Vec<BnStats<S>>>,
    /// Collects the (unquantized) tensors at every activation site.
    pub sites: Option<&'a mut Vec<Tensor<S>>>,
}

impl<S: Scalar> Ctx<'_, S> {
    fn norm(&mut self, bn: &BatchNorm<S>, x: &Tensor<S>) -> Tensor<S> {
        match self.stats.as_deref_mut() {
            Some(stats) => {
                let (y, st) = bn.forward_train(x);
                stats.push(st);
                y
            }
            None => bn.forward_frozen(x),
        }
    }

    fn site(&mut self, x: &Tensor<S>, q: Option<&ActQuantState<S>>) -> Result<Tensor<S>> {
        if let Some(sites) = self.sites.as_deref_mut() {
            sites.push(x.clone());
        }
        match q {
            Some(st) => Ok(lsq_quantize_act(x, st)?),
            None => Ok(x.clone()),
        }
    }
}

/// conv3x3-BN-ReLU, conv3x3-BN, plus an identity or 1x1 projection shortcut,
/// followed by ReLU.
#[derive(Debug, Clone)]
pub struct ResBlock<S: Scalar> {
    pub conv_a: Conv2d<S>,
    pub bn_a: BatchNorm<S>,
    pub conv_b: Conv2d<S>,
    pub bn_b: BatchNorm<S>,
    pub shortcut: Option<Conv2d<S>>,
}

impl<S: Scalar> ResBlock<S> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            conv_a: Conv2d::new(rng, cin, cout, 3, stride, false),
            bn_a: BatchNorm::new(cout),
            conv_b: Conv2d::new(rng, cout, cout, 3, 1, false),
            bn_b: BatchNorm::new(cout),
            shortcut: (cin != cout || stride != 1).then(|| Conv2d::new(rng, cin, cout, 1, stride, false)),
        }
    }

    fn forward(&self, x: &Tensor<S>, q: Option<&BlockQuant<S>>, ctx: &mut Ctx<'_, S>) -> Result<Tensor<S>> {
        let wq = |i: usize, w: &Tensor<S>| -> Result<Tensor<S>> {
            match q {
                Some(q) => Ok(quantize_learned(w, &q.weights[i])?),
                None => Ok(w.clone()),
            }
        };
        let x = ctx.site(x, q.and_then(|q| q.act_in.as_ref()))?;
        let h = self.conv_a.forward_with(&x, &wq(0, &self.conv_a.weight)?);
        let h = ctx.norm(&self.bn_a, &h).relu();
        let h = ctx.site(&h, q.and_then(|q| q.act_mid.as_ref()))?;
        let h = self.conv_b.forward_with(&h, &wq(1, &self.conv_b.weight)?);
        let h = ctx.norm(&self.bn_b, &h);
        let skip = match &self.shortcut {
            Some(sc) => sc.forward_with(&x, &wq(2, &sc.weight)?),
            None => x,
        };
        Ok(h.add(&skip).relu())
    }
}

/// Fully connected layer with optional ReLU; flattens its input.
#[derive(Debug, Clone)]
pub struct DenseBlock<S: Scalar> {
    pub linear: Linear<S>,
    pub relu: bool,
}

impl<S: Scalar> DenseBlock<S> {
    fn forward(&self, x: &Tensor<S>, q: Option<&BlockQuant<S>>, ctx: &mut Ctx<'_, S>) -> Result<Tensor<S>> {
        let x = if x.ndim() > 2 { x.flatten_from(1) } else { x.clone() };
        let x = ctx.site(&x, q.and_then(|q| q.act_in.as_ref()))?;
        let w = match q {
            Some(q) => quantize_learned(&self.linear.weight, &q.weights[0])?,
            None => self.linear.weight.clone(),
        };
        let y = self.linear.forward_with(&x, &w);
        Ok(if self.relu { y.relu() } else { y })
    }
}

#[derive(Debug, Clone)]
pub enum Block<S: Scalar> {
    Residual(ResBlock<S>),
    Dense(DenseBlock<S>),
}

impl<S: Scalar> Block<S> {
    /// Weight tensors that receive a quantizer, in a fixed order.
    pub fn weights(&self) -> Vec<&Tensor<S>> {
        match self {
            Block::Residual(b) => {
                let mut w = vec![&b.conv_a.weight, &b.conv_b.weight];
                if let Some(sc) = &b.shortcut {
                    w.push(&sc.weight);
                }
                w
            }
            Block::Dense(d) => vec![&d.linear.weight],
        }
    }

    /// Indices into [`Block::weights`] that read the block input directly.
    pub fn input_weights(&self) -> Vec<usize> {
        match self {
            Block::Residual(b) if b.shortcut.is_some() => vec![0, 2],
            _ => vec![0],
        }
    }

    pub fn has_mid_site(&self) -> bool {
        matches!(self, Block::Residual(_))
    }

    pub(crate) fn forward(&self, x: &Tensor<S>, q: Option<&BlockQuant<S>>, ctx: &mut Ctx<'_, S>) -> Result<Tensor<S>> {
        match self {
            Block::Residual(b) => b.forward(x, q, ctx),
            Block::Dense(d) => d.forward(x, q, ctx),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor<S>)) {
        let conv = |name: &str, c: &mut Conv2d<S>, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor<S>)| {
            f(&format!("{prefix}.{name}.weight"), TensorKind::Param, &mut c.weight);
            if let Some(b) = &mut c.bias {
                f(&format!("{prefix}.{name}.bias"), TensorKind::Param, b);
            }
        };
        let bn = |name: &str, n: &mut BatchNorm<S>, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor<S>)| {
            f(&format!("{prefix}.{name}.gamma"), TensorKind::Param, &mut n.gamma);
            f(&format!("{prefix}.{name}.beta"), TensorKind::Param, &mut n.beta);
            f(&format!("{prefix}.{name}.running_mean"), TensorKind::Buffer, &mut n.running_mean);
            f(&format!("{prefix}.{name}.running_var"), TensorKind::Buffer, &mut n.running_var);
        };
        match self {
            Block::Residual(b) => {
                conv("conv_a", &mut b.conv_a, f);
                bn("bn_a", &mut b.bn_a, f);
                conv("conv_b", &mut b.conv_b, f);
                bn("bn_b", &mut b.bn_b, f);
                if let Some(sc) = &mut b.shortcut {
                    conv("shortcut", sc, f);
                }
            }
            Block::Dense(d) => {
                f(&format!("{prefix}.linear.weight"), TensorKind::Param, &mut d.linear.weight);
                f(&format!("{prefix}.linear.bias"), TensorKind::Param, &mut d.linear.bias);
            }
        }
    }

    pub(crate) fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        match self {
            Block::Residual(b) => vec![&mut b.bn_a, &mut b.bn_b],
            Block::Dense(_) => Vec::new(),
        }
    }
}

/// Classifier head: global average pooling (for image-shaped input) and a
/// linear layer, or the identity.
#[derive(Debug, Clone)]
pub enum Head<S: Scalar> {
    Identity,
    Linear(Linear<S>),
}

/// Pools `[N, C, H, W]` to `[N, C]`; flattens anything else to `[N, D]`.
pub fn pool_features<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    match x.ndim() {
        4 => x.global_avg_pool(),
        2 => x.clone(),
        _ => x.flatten_from(1),
    }
}

/// Architecture of the residual classifier built by [`build_tiny_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels per block; the block count is its length.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            widths: vec![16, 32, 64],
            classes: 10,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub const MAX_WIDTH: usize = 64;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidArch(m));
        if !(2..=4).contains(&self.widths.len()) {
            return bad(format!("block count {} outside 2..=4", self.widths.len()));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w > Self::MAX_WIDTH) {
            return bad(format!("block width {w} outside 1..={}", Self::MAX_WIDTH));
        }
        if self.image_size != 32 {
            return bad(format!("input size {} (only 32x32 is supported)", self.image_size));
        }
        if self.in_channels == 0 || self.classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        Ok(())
    }

    /// First block keeps the resolution, later blocks halve it.
    pub fn stride(&self, block: usize) -> usize {
        if block == 0 {
            1
        } else {
            2
        }
    }

    /// Closed-form parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = self.in_channels;
        for (l, &c) in self.widths.iter().enumerate() {
            total += 9 * cin * c + 2 * c + 9 * c * c + 2 * c;
            if cin != c || self.stride(l) != 1 {
                total += cin * c;
            }
            cin = c;
        }
        total + cin * self.classes + self.classes
    }
}

/// A network split into blocks with a tap after each one.
#[derive(Debug, Clone)]
pub struct BlockModel<S: Scalar> {
    /// Per-sample input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub blocks: Vec<Block<S>>,
    pub head: Head<S>,
}

/// Seeded residual classifier for 32x32 images.
pub fn build_tiny_model<S: Scalar>(arch: &ArchConfig) -> Result<BlockModel<S>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let mut blocks = Vec::with_capacity(arch.widths.len());
    let mut cin = arch.in_channels;
    for (l, &c) in arch.widths.iter().enumerate() {
        blocks.push(Block::Residual(ResBlock::new(&mut rng, cin, c, arch.stride(l))));
        cin = c;
    }
    let head = Head::Linear(Linear::new(&mut rng, cin, arch.classes));
    Ok(BlockModel {
        input_shape: vec![arch.in_channels, arch.image_size, arch.image_size],
        blocks,
        head,
    })
}

impl<S: Scalar> BlockModel<S> {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] || x.shape()[0] == 0 {
            return Err(NetError::Shape(format!(
                "expected [N, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_block(&self, l: usize) -> Result<()> {
        if l >= self.blocks.len() {
            return Err(NetError::BlockIndex {
                index: l,
                blocks: self.blocks.len(),
            });
        }
        Ok(())
    }

    /// Block `l` (0-based) in inference mode; `x` is the block input.
    pub fn forward_block(&self, l: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_block(l)?;
        self.blocks[l].forward(x, None, &mut Ctx::default())
    }

    pub fn head_forward(&self, features: &Tensor<S>) -> Tensor<S> {
        match &self.head {
            Head::Identity => features.clone(),
            Head::Linear(lin) => lin.forward(&pool_features(features)),
        }
    }

    /// Inference-mode logits.
    pub fn forward_model(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.blocks.len() {
            h = self.forward_block(l, &h)?;
        }
        Ok(self.head_forward(&h))
    }

    /// Every block output `A^1..A^L` in inference mode.
    pub fn taps(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        self.check_input(x)?;
        let mut out: Vec<Tensor<S>> = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let next = self.forward_block(l, out.last().unwrap_or(x))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Penultimate features: pooled output of the last block.
    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let taps = self.taps(x)?;
        Ok(pool_features(taps.last().expect("at least one block")))
    }

    /// Logits with batch-statistics normalization; returns the observed statistics.
    pub fn forward_train(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<BnStats<S>>)> {
        self.check_input(x)?;
        let mut stats = Vec::new();
        let mut h = x.clone();
        for b in &self.blocks {
            let mut ctx = Ctx {
                stats: Some(&mut stats),
                sites: None,
            };
            h = b.forward(&h, None, &mut ctx)?;
        }
        Ok((self.head_forward(&h), stats))
    }

    /// Applies statistics from [`BlockModel::forward_train`] to the running buffers.
    pub fn update_running_stats(&mut self, stats: &[BnStats<S>]) {
        let mut it = stats.iter();
        for b in &mut self.blocks {
            for bn in b.batchnorms_mut() {
                bn.update_running(it.next().expect("one statistics entry per normalization layer"));
            }
        }
    }

    /// Visits every named tensor in a stable order.
    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, TensorKind, &mut Tensor<S>)) {
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("block{l}"), f);
        }
        if let Head::Linear(lin) = &mut self.head {
            f("head.weight", TensorKind::Param, &mut lin.weight);
            f("head.bias", TensorKind::Param, &mut lin.bias);
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, TensorKind, Tensor<S>)> {
        let mut out = Vec::new();
        self.clone().visit_tensors_mut(&mut |n, k, t| out.push((n.to_string(), k, t.clone())));
        out
    }

    pub fn params(&self) -> Vec<Tensor<S>> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Param)
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn set_params(&mut self, params: &[Tensor<S>]) {
        let mut it = params.iter();
        self.visit_tensors_mut(&mut |_, k, t| {
            if k == TensorKind::Param {
                *t = it.next().expect("parameter list too short").clone();
            }
        });
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    /// Number of block taps.
    pub fn tap_count(&self) -> usize {
        self.blocks.len()
    }
}
