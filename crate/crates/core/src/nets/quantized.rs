use serde::{Deserialize, Serialize};

use super::model::{pool_features, BlockModel, BlockQuant, Ctx, Head};
use super::Result;
use crate::quant::{init_scale_search, lsq_quantize_act, quantize_uniform, ActQuantState, Bits, QuantParams};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

/// Bit-width protocol for a quantized twin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub w_bits: Bits,
    pub a_bits: Bits,
    /// Layers reading the image and the classifier stay at 8 bits.
    pub eight_bit_edges: bool,
    /// The input of the second layer is quantized at 8 bits.
    pub second_layer_act_8bit: bool,
    pub per_channel: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            w_bits: Bits::new(4).expect("valid"),
            a_bits: Bits::new(4).expect("valid"),
            eight_bit_edges: true,
            second_layer_act_8bit: false,
            per_channel: false,
        }
    }
}

impl QuantConfig {
    pub fn disabled() -> Self {
        Self {
            w_bits: Bits::FULL,
            a_bits: Bits::FULL,
            ..Self::default()
        }
    }

    /// Pinned layers use 8 bits unless quantization is off altogether.
    fn pinned(bits: Bits) -> Bits {
        if bits.enabled() {
            Bits::new(8).expect("valid")
        } else {
            bits
        }
    }

    fn weight_bits(&self, edge: bool) -> Bits {
        if edge && self.eight_bit_edges {
            Self::pinned(self.w_bits)
        } else {
            self.w_bits
        }
    }

    fn act_bits(&self, pinned: bool) -> Bits {
        if pinned {
            Self::pinned(self.a_bits)
        } else {
            self.a_bits
        }
    }
}

/// A [`BlockModel`] together with quantizers for every weight and activation site.
#[derive(Debug, Clone)]
pub struct QuantizedModel<S: Scalar> {
    pub fp: BlockModel<S>,
    pub blocks: Vec<BlockQuant<S>>,
    /// Round-to-nearest classifier weight quantizer (scale only).
    pub head_w: Option<(Tensor<S>, Bits)>,
    pub head_act: Option<ActQuantState<S>>,
    pub cfg: QuantConfig,
}

fn any_negative<S: Scalar>(t: &Tensor<S>) -> bool {
    t.data().iter().any(|&x| x < S::zero())
}

impl<S: Scalar> QuantizedModel<S> {
    /// Initializes weight scales by MSE search and activation scales from the
    /// full-precision activations of `calib`.
    pub fn init(fp: &BlockModel<S>, cfg: QuantConfig, calib: &Tensor<S>) -> Result<Self> {
        fp.check_input(calib)?;
        no_grad(|| {
            let mut blocks = Vec::with_capacity(fp.blocks.len());
            let mut h = calib.clone();
            for (l, block) in fp.blocks.iter().enumerate() {
                let mut sites = Vec::new();
                let next = block.forward(
                    &h,
                    None,
                    &mut Ctx {
                        stats: None,
                        sites: Some(&mut sites),
                    },
                )?;
                let edge_inputs = if l == 0 { block.input_weights() } else { Vec::new() };
                let weights = block
                    .weights()
                    .into_iter()
                    .enumerate()
                    .map(|(i, w)| QuantParams::init(w, cfg.weight_bits(edge_inputs.contains(&i)), true, cfg.per_channel))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let act = |t: &Tensor<S>, bits: Bits| ActQuantState::init(t, bits, any_negative(t));
                // The raw image entering the first block is never quantized.
                let act_in = if l == 0 { None } else { Some(act(&sites[0], cfg.act_bits(false))?) };
                let act_mid = if block.has_mid_site() {
                    Some(act(&sites[1], cfg.act_bits(l == 0 && cfg.second_layer_act_8bit))?)
                } else {
                    None
                };
                blocks.push(BlockQuant { weights, act_in, act_mid });
                h = next;
            }
            let (head_w, head_act) = match &fp.head {
                Head::Identity => (None, None),
                Head::Linear(lin) => {
                    let bits = cfg.weight_bits(true);
                    let s = if bits.enabled() {
                        init_scale_search(&lin.weight, bits, true)?
                    } else {
                        S::one()
                    };
                    let pooled = pool_features(&h);
                    let act = ActQuantState::init(&pooled, cfg.act_bits(cfg.eight_bit_edges), any_negative(&pooled))?;
                    (Some((Tensor::full(&[1], s), bits)), Some(act))
                }
            };
            Ok(Self {
                fp: fp.clone(),
                blocks,
                head_w,
                head_act,
                cfg,
            })
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block `l` with explicitly supplied quantization state.
    pub fn forward_block_with(&self, l: usize, x: &Tensor<S>, q: &BlockQuant<S>) -> Result<Tensor<S>> {
        self.fp.check_block(l)?;
        self.fp.blocks[l].forward(x, Some(q), &mut Ctx::default())
    }

    pub fn forward_block(&self, l: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fp.check_block(l)?;
        self.forward_block_with(l, x, &self.blocks[l])
    }

    /// Quantized classifier head.
    pub fn head_forward(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        match (&self.fp.head, &self.head_w, &self.head_act) {
            (Head::Linear(lin), Some((s, bits)), Some(act)) => {
                let x = lsq_quantize_act(&pool_features(features), act)?;
                let w = quantize_uniform(&lin.weight, s, *bits, true)?;
                Ok(lin.forward_with(&x, &w))
            }
            _ => Ok(self.fp.head_forward(features)),
        }
    }

    /// Fully quantized logits.
    pub fn forward_model(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fp.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.blocks.len() {
            h = self.forward_block(l, &h)?;
        }
        self.head_forward(&h)
    }

    /// Input of block `l` as produced by the quantized blocks before it.
    pub fn block_input(&self, l: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for j in 0..l {
            h = self.forward_block(j, &h)?;
        }
        Ok(h)
    }

    /// Logits of the partially quantized network used while block `l` is
    /// being optimized: quantized blocks before `l`, block `l` with state `q`,
    /// full-precision blocks and head after it.
    pub fn forward_hybrid(&self, l: usize, q: &BlockQuant<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fp.check_block(l)?;
        let mut h = self.block_input(l, x)?;
        h = self.forward_block_with(l, &h, q)?;
        for j in l + 1..self.blocks.len() {
            h = self.fp.forward_block(j, &h)?;
        }
        Ok(self.fp.head_forward(&h))
    }

    /// Count of weight quantizers (enabled or not).
    pub fn weight_sites(&self) -> usize {
        self.blocks.iter().map(|b| b.weights.len()).sum::<usize>() + usize::from(self.head_w.is_some())
    }

    /// Bits of every weight quantizer, the classifier last.
    pub fn weight_bits(&self) -> Vec<Bits> {
        let mut out: Vec<Bits> = self.blocks.iter().flat_map(|b| b.weights.iter().map(|q| q.bits)).collect();
        if let Some((_, b)) = &self.head_w {
            out.push(*b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_tiny_model, ArchConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BlockModel<f64>, Tensor<f64>) {
        let arch = ArchConfig {
            widths: vec![4, 8],
            seed: 1,
            ..ArchConfig::default()
        };
        let m = build_tiny_model(&arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.gen()).collect();
        (m, Tensor::from_f64(&[2, 3, 32, 32], &x).unwrap())
    }

    #[test]
    fn disabled_twin_is_bit_exact() {
        let (m, x) = setup();
        let q = QuantizedModel::init(&m, QuantConfig::disabled(), &x).unwrap();
        assert!(q.forward_model(&x).unwrap().bit_eq(&m.forward_model(&x).unwrap()));
        let a = m.forward_block(0, &x).unwrap();
        assert!(q.forward_block(0, &x).unwrap().bit_eq(&a));
    }

    #[test]
    fn two_bit_block_differs() {
        let (m, x) = setup();
        let cfg = QuantConfig {
            w_bits: Bits::new(2).unwrap(),
            a_bits: Bits::FULL,
            eight_bit_edges: false,
            ..QuantConfig::default()
        };
        let q = QuantizedModel::init(&m, cfg, &x).unwrap();
        let h = m.forward_block(0, &x).unwrap();
        let d = q.forward_block(1, &h).unwrap().sub(&m.forward_block(1, &h).unwrap());
        assert!(d.square().sum().item() > 0.0);
    }

    #[test]
    fn edges_pinned_at_eight_bits() {
        let (m, x) = setup();
        let cfg = QuantConfig {
            w_bits: Bits::new(2).unwrap(),
            a_bits: Bits::new(2).unwrap(),
            eight_bit_edges: true,
            second_layer_act_8bit: true,
            per_channel: false,
        };
        let q = QuantizedModel::init(&m, cfg, &x).unwrap();
        let bits: Vec<u32> = q.weight_bits().iter().map(|b| b.get()).collect();
        // block 0: conv_a, conv_b, shortcut; block 1: conv_a, conv_b, shortcut; head
        assert_eq!(bits, vec![8, 2, 8, 2, 2, 2, 8]);
        assert_eq!(q.blocks[0].act_mid.as_ref().unwrap().bits.get(), 8);
        assert_eq!(q.blocks[1].act_mid.as_ref().unwrap().bits.get(), 2);
        assert!(q.blocks[0].act_in.is_none());
    }

    #[test]
    fn with_params_round_trips() {
        let (m, x) = setup();
        let q = QuantizedModel::init(&m, QuantConfig::default(), &x).unwrap();
        let p = q.blocks[1].params();
        let r = q.blocks[1].with_params(&p);
        for (a, b) in p.iter().zip(r.params()) {
            assert!(a.same_node(&b));
        }
    }
}
