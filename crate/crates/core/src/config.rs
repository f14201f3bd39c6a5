//! Run configuration: a strict TOML document with sections `model`, `data`,
//! `train`, `quantization`, `meta` and `run`.
//!
//! Absent `meta` keys take the value of the selected preset; unknown keys
//! anywhere are rejected with their line number.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataSpec;
use crate::losses::PreserveKind;
use crate::meta::InnerKind;
use crate::nets::{ArchConfig, QuantConfig, TrainConfig, UNetConfig};
use crate::pipeline::{FeatureSource, MetaConfig, Preset, Strategy};
use crate::quant::Bits;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Weight and activation bit-widths, written `"W,A"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitWidths {
    pub w: Bits,
    pub a: Bits,
}

impl BitWidths {
    pub fn new(w: u32, a: u32) -> std::result::Result<Self, String> {
        let w = Bits::new(w).map_err(|e| e.to_string())?;
        let a = Bits::new(a).map_err(|e| e.to_string())?;
        Ok(Self { w, a })
    }
}

impl FromStr for BitWidths {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, a) = s
            .split_once([',', '/'])
            .ok_or_else(|| format!("bit-widths must look like \"W,A\", got {s:?}"))?;
        let num = |t: &str| t.trim().parse::<u32>().map_err(|e| format!("bit-width {t:?}: {e}"));
        Self::new(num(w)?, num(a)?)
    }
}

impl TryFrom<String> for BitWidths {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<BitWidths> for String {
    fn from(b: BitWidths) -> String {
        b.to_string()
    }
}

impl fmt::Display for BitWidths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.w.get(), self.a.get())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub bits: BitWidths,
    /// Second-layer input activations at 8 bits.
    pub star: bool,
    pub eight_bit_edges: bool,
    pub per_channel: bool,
}

impl Default for QuantSection {
    fn default() -> Self {
        let q = QuantConfig::default();
        Self {
            bits: BitWidths { w: q.w_bits, a: q.a_bits },
            star: q.second_layer_act_8bit,
            eight_bit_edges: q.eight_bit_edges,
            per_channel: q.per_channel,
        }
    }
}

impl QuantSection {
    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            w_bits: self.bits.w,
            a_bits: self.bits.a,
            eight_bit_edges: self.eight_bit_edges,
            second_layer_act_8bit: self.star,
            per_channel: self.per_channel,
        }
    }
}

/// Meta-learning and calibration settings; every key is optional and
/// falls back to the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// Defaults by preservation kind: 1 (mse), 5 (kl), 3e4 (dp).
    pub lambda3: Option<f64>,
    pub epsilon: Option<f64>,
    pub preserve_kind: Option<PreserveKind>,
    pub features: Option<FeatureSource>,
    pub inner: Option<InnerKind>,
    pub n_t: Option<usize>,
    pub n_q: Option<usize>,
    pub warmup_iters: Option<usize>,
    pub warmup_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub val_batch_size: Option<usize>,
    pub rounding_lr: Option<f64>,
    pub scale_lr: Option<f64>,
    pub rounding_weight: Option<f64>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub mix_alpha: Option<f64>,
    pub mix_lambda: Option<f64>,
    pub unet_width: Option<usize>,
}

/// Lists expanded into a cartesian product of runs; an empty list keeps the
/// base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub bits: Vec<BitWidths>,
    pub calib_sizes: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub preset: Preset,
    pub strategy: Strategy,
    pub sweep: SweepSection,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            preset: Preset::Desk,
            strategy: Strategy::MetaAug,
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ArchConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub quantization: QuantSection,
    pub meta: MetaSection,
    pub run: RunSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parses and validates a document; `path` only labels errors.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate().map_err(|msg| ConfigError::Invalid {
            path: path.to_path_buf(),
            msg,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Short digest of the canonical serialization.
    pub fn hash(&self) -> String {
        crate::checkpoint::config_hash(&self.to_toml())
    }

    /// Digest of the sections that determine the full-precision model.
    pub fn fp_hash(&self) -> String {
        #[derive(Serialize)]
        struct FpPart<'a> {
            model: &'a ArchConfig,
            data: &'a DataSpec,
            train: &'a TrainConfig,
        }
        let part = FpPart {
            model: &self.model,
            data: &self.data,
            train: &self.train,
        };
        crate::checkpoint::config_hash(&toml::to_string(&part).expect("model sections serialize"))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        if self.data.classes != self.model.classes {
            return Err(format!(
                "data has {} classes but the model predicts {}",
                self.data.classes, self.model.classes
            ));
        }
        if self.data.image_size != self.model.image_size {
            return Err(format!(
                "data images are {} pixels wide but the model expects {}",
                self.data.image_size, self.model.image_size
            ));
        }
        if self.data.calib_size < 2 {
            return Err("data.calib_size must be at least 2".into());
        }
        self.meta_config().validate().map_err(|e| e.to_string())
    }

    /// Preset values overridden by the keys present in `[meta]` and
    /// `[quantization]`.
    pub fn meta_config(&self) -> MetaConfig {
        let m = &self.meta;
        let mut c = MetaConfig::preset(self.run.preset);
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = m.$f { c.$f = v; } )* };
        }
        take!(eta, gamma, inner, features, n_t, n_q, warmup_iters, warmup_lr, batch_size, val_batch_size);
        take!(rounding_lr, scale_lr, rounding_weight, beta_start, beta_end, mix_alpha);
        if m.mix_lambda.is_some() {
            c.mix_lambda = m.mix_lambda;
        }
        if let Some(k) = m.preserve_kind {
            c.weights.preserve_kind = k;
            c.weights.lambda3 = k.default_lambda();
        }
        let w = &mut c.weights;
        w.lambda1 = m.lambda1.unwrap_or(w.lambda1);
        w.lambda2 = m.lambda2.unwrap_or(w.lambda2);
        w.lambda3 = m.lambda3.unwrap_or(w.lambda3);
        w.epsilon = m.epsilon.unwrap_or(w.epsilon);
        if let Some(width) = m.unet_width {
            c.unet.base_width = width;
        }
        c.unet = UNetConfig {
            channels: self.model.in_channels,
            ..c.unet
        };
        c.quant = self.quantization.quant_config();
        c.seed = self.run.seed;
        c
    }

    /// Every run of the sweep, labeled by the swept values.
    pub fn expand_sweep(&self) -> Vec<(String, RunConfig)> {
        let s = &self.run.sweep;
        let mut runs = vec![(String::new(), self.clone())];
        fn axis<V: Clone>(
            runs: Vec<(String, RunConfig)>,
            values: &[V],
            name: impl Fn(&V) -> String,
            set: impl Fn(&mut RunConfig, &V),
        ) -> Vec<(String, RunConfig)> {
            if values.is_empty() {
                return runs;
            }
            let (name, set) = (&name, &set);
            runs.into_iter()
                .flat_map(|(label, cfg)| {
                    values.iter().map(move |v| {
                        let mut c = cfg.clone();
                        set(&mut c, v);
                        let sep = if label.is_empty() { "" } else { "-" };
                        (format!("{label}{sep}{}", name(v)), c)
                    })
                })
                .collect()
        }
        runs = axis(runs, &s.strategies, |v| v.to_string(), |c, v| c.run.strategy = *v);
        runs = axis(runs, &s.bits, |v| format!("w{}a{}", v.w.get(), v.a.get()), |c, v| c.quantization.bits = *v);
        runs = axis(runs, &s.calib_sizes, |v| format!("n{v}"), |c, v| c.data.calib_size = *v);
        runs = axis(runs, &s.lambda1, |v| format!("l1_{v}"), |c, v| c.meta.lambda1 = Some(*v));
        runs = axis(runs, &s.lambda2, |v| format!("l2_{v}"), |c, v| c.meta.lambda2 = Some(*v));
        runs = axis(runs, &s.lambda3, |v| format!("l3_{v}"), |c, v| c.meta.lambda3 = Some(*v));
        runs = axis(runs, &s.epsilon, |v| format!("eps_{v}"), |c, v| c.meta.epsilon = Some(*v));
        runs = axis(runs, &s.seeds, |v| format!("s{v}"), |c, v| c.run.seed = *v);
        for (label, c) in &mut runs {
            c.run.sweep = SweepSection::default();
            if label.is_empty() {
                *label = "run".into();
            }
        }
        runs
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse("").unwrap();
        let m = c.meta_config();
        assert_eq!(m.weights.lambda1, 5.0);
        assert_eq!(m.weights.lambda2, 0.5);
        assert_eq!(m.weights.lambda3, 3e4);
        assert_eq!(m.weights.epsilon, 0.1);
        assert_eq!(m.gamma, 5e-6);
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let err = parse("[meta]\nlambda1 = 2.0\nlamda1 = 5.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lamda1"), "{msg}");
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn bits_protocol() {
        let c = parse("[quantization]\nbits = \"2,4\"\n").unwrap();
        let q = c.meta_config().quant;
        assert_eq!((q.w_bits.get(), q.a_bits.get()), (2, 4));
        assert!(parse("[quantization]\nbits = \"5,4\"\n").is_err());
    }

    #[test]
    fn preserve_kind_sets_lambda3() {
        let c = parse("[meta]\npreserve_kind = \"kl\"\n").unwrap();
        assert_eq!(c.meta_config().weights.lambda3, 5.0);
        let c = parse("[meta]\npreserve_kind = \"mse\"\nlambda3 = 2.5\n").unwrap();
        assert_eq!(c.meta_config().weights.lambda3, 2.5);
    }

    #[test]
    fn type_mismatch_and_range() {
        assert!(matches!(parse("[meta]\nn_t = \"many\"\n"), Err(ConfigError::Parse { line: 2, .. })));
        assert!(matches!(parse("[meta]\nlambda2 = -1.0\n"), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn serialization_round_trips() {
        let c = parse("[run]\npreset = \"acceptance\"\nstrategy = \"metaaug+cutmix\"\n[meta]\nmix_lambda = 1.0\n").unwrap();
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sweep_expansion() {
        let c = parse("[run.sweep]\nseeds = [1, 2]\nstrategies = [\"none\", \"flip\", \"metaaug\"]\n").unwrap();
        let runs = c.expand_sweep();
        assert_eq!(runs.len(), 6);
        assert_eq!(runs[0].0, "none-s1");
        assert_eq!(runs[5].1.run.strategy, Strategy::MetaAug);
        assert_eq!(runs[5].1.run.seed, 2);
    }

    #[test]
    fn directory_source() {
        let c = parse("[data]\nsource = { dir = \"/data/set\" }\n").unwrap();
        assert_eq!(c.data.source, crate::data::DataSource::Dir("/data/set".into()));
        assert_eq!(parse("[data]\nsource = \"blobs\"\n").unwrap().data.source, crate::data::DataSource::Blobs);
    }
}
