//! Tensor container used for model checkpoints and raw datasets.
//!
//! A file is a UTF-8 header followed by a little-endian `f64` payload:
//!
//! ```text
//! metaptq-tensors 1
//! config-hash <hex or ->
//! meta <key> <value>
//! tensor <name> <dims, comma separated> <offset> <count>
//! payload <count> <sha256 of payload>
//! end
//! ```
//!
//! Offsets and counts are in elements; tensors are stored contiguously in
//! header order.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nets::{ArchConfig, BlockModel, QuantConfig, QuantizedModel, Transform, TransformNet, UNetConfig};
use crate::quant::Bits;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "metaptq-tensors";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("malformed header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("payload holds {found} bytes but the header declares {expected}")]
    Length { expected: usize, found: usize },
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("tensor `{name}`: expected shape {expected:?}, file has {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from file")]
    Missing(String),
    #[error("tensor `{name}` holds a non-finite value")]
    NonFinite { name: String },
    #[error("metadata `{key}`: {msg}")]
    Meta { key: String, msg: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory form of a tensor file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub config_hash: Option<String>,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl TensorFile {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn push_tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) {
        self.push(name, t.shape().to_vec(), t.data().iter().map(|x| x.as_f64()).collect());
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Tensor `name`, which must have shape `expected`.
    pub fn tensor<S: Scalar>(&self, name: &str, expected: &[usize]) -> Result<Tensor<S>> {
        let e = self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if e.shape != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: e.shape.clone(),
            });
        }
        Tensor::from_f64(&e.shape, &e.data).map_err(|_| CheckpointError::NonFinite { name: name.to_string() })
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| CheckpointError::Meta {
            key: key.to_string(),
            msg: "missing".into(),
        })
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_str(key)?.parse().map_err(|_| CheckpointError::Meta {
            key: key.to_string(),
            msg: "unparsable value".into(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut header = format!(
            "{MAGIC} {FORMAT_VERSION}\nconfig-hash {}\n",
            self.config_hash.as_deref().unwrap_or("-")
        );
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
            header.push_str(&format!("tensor {} {dims} {offset} {}\n", e.name, e.data.len()));
            offset += e.data.len();
            for x in &e.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = hex(&Sha256::digest(&payload));
        header.push_str(&format!("payload {offset} {digest}\nend\n"));
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end_marker = b"\nend\n";
        let split = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or(CheckpointError::Header {
                line: 0,
                msg: "no `end` line".into(),
            })?
            + end_marker.len();
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| CheckpointError::Header {
            line: 0,
            msg: "header is not UTF-8".into(),
        })?;
        let payload = &bytes[split..];

        let mut file = TensorFile::default();
        let mut declared: Option<(usize, String)> = None;
        let mut specs: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for (i, line) in header.lines().enumerate() {
            let lineno = i + 1;
            let bad = |msg: &str| CheckpointError::Header {
                line: lineno,
                msg: msg.to_string(),
            };
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match key {
                MAGIC if lineno == 1 => {
                    if rest != FORMAT_VERSION.to_string() {
                        return Err(CheckpointError::Version { found: rest.to_string() });
                    }
                }
                _ if lineno == 1 => return Err(bad("not a metaptq tensor file")),
                "config-hash" => file.config_hash = (rest != "-").then(|| rest.to_string()),
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad("meta needs a key and a value"))?;
                    file.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad("tensor line needs name, dims, offset, count"));
                    }
                    let shape = if f[1] == "-" {
                        Vec::new()
                    } else {
                        f[1].split(',')
                            .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                            .collect::<Result<Vec<_>>>()?
                    };
                    let offset = f[2].parse().map_err(|_| bad("bad offset"))?;
                    let count: usize = f[3].parse().map_err(|_| bad("bad count"))?;
                    if shape.iter().product::<usize>() != count {
                        return Err(bad("shape does not match element count"));
                    }
                    specs.push((f[0].to_string(), shape, offset, count));
                }
                "payload" => {
                    let (n, d) = rest.split_once(' ').ok_or_else(|| bad("payload needs count and digest"))?;
                    declared = Some((n.parse().map_err(|_| bad("bad payload count"))?, d.to_string()));
                }
                "end" => {}
                _ => return Err(bad(&format!("unknown record `{key}`"))),
            }
        }
        let (count, digest) = declared.ok_or(CheckpointError::Header {
            line: 0,
            msg: "no payload record".into(),
        })?;
        if payload.len() != count * 8 {
            return Err(CheckpointError::Length {
                expected: count * 8,
                found: payload.len(),
            });
        }
        if hex(&Sha256::digest(payload)) != digest {
            return Err(CheckpointError::Checksum);
        }
        for (name, shape, offset, n) in specs {
            if offset + n > count {
                return Err(CheckpointError::Length {
                    expected: (offset + n) * 8,
                    found: payload.len(),
                });
            }
            let data = payload[offset * 8..(offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            file.entries.push(Entry { name, shape, data });
        }
        Ok(file)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short hex digest of a configuration document.
pub fn config_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes())[..8])
}

pub fn write_file(file: &TensorFile, path: &Path) -> Result<()> {
    fs::write(path, file.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorFile::from_bytes(&bytes)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn arch_meta(file: &mut TensorFile, arch: &ArchConfig) {
    file.meta.insert("arch.in_channels".into(), arch.in_channels.to_string());
    file.meta.insert("arch.image_size".into(), arch.image_size.to_string());
    file.meta.insert("arch.widths".into(), join(&arch.widths));
    file.meta.insert("arch.classes".into(), arch.classes.to_string());
    file.meta.insert("arch.seed".into(), arch.seed.to_string());
}

fn arch_from_meta(file: &TensorFile) -> Result<ArchConfig> {
    let widths = file
        .meta_str("arch.widths")?
        .split(',')
        .map(|w| w.parse())
        .collect::<std::result::Result<Vec<usize>, _>>()
        .map_err(|_| CheckpointError::Meta {
            key: "arch.widths".into(),
            msg: "unparsable value".into(),
        })?;
    Ok(ArchConfig {
        in_channels: file.meta_parse("arch.in_channels")?,
        image_size: file.meta_parse("arch.image_size")?,
        widths,
        classes: file.meta_parse("arch.classes")?,
        seed: file.meta_parse("arch.seed")?,
    })
}

/// Container for a residual classifier built from `arch`.
pub fn model_file<S: Scalar>(model: &BlockModel<S>, arch: &ArchConfig, config_hash: Option<&str>) -> TensorFile {
    let mut file = TensorFile {
        config_hash: config_hash.map(str::to_string),
        ..TensorFile::default()
    };
    file.meta.insert("kind".into(), "fp-model".into());
    arch_meta(&mut file, arch);
    for (name, _, t) in model.named_tensors() {
        file.push_tensor(&name, &t);
    }
    file
}

/// Overwrites every tensor of `model` from `file`, checking names and shapes.
pub fn load_tensors_into<S: Scalar>(model: &mut BlockModel<S>, file: &TensorFile) -> Result<()> {
    let mut err = None;
    model.visit_tensors_mut(&mut |name, _, t| {
        if err.is_some() {
            return;
        }
        match file.tensor(name, t.shape()) {
            Ok(v) => *t = v,
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}

fn check_hash(file: &TensorFile, expected: Option<&str>) {
    if let (Some(found), Some(want)) = (file.config_hash.as_deref(), expected) {
        if found != want {
            warn!("checkpoint config hash {found} differs from current config {want}");
        }
    }
}

pub fn save_model<S: Scalar>(model: &BlockModel<S>, arch: &ArchConfig, config_hash: Option<&str>, path: &Path) -> Result<()> {
    write_file(&model_file(model, arch, config_hash), path)
}

/// Rebuilds the architecture recorded in the file and loads its tensors.
pub fn load_model<S: Scalar>(path: &Path, config_hash: Option<&str>) -> Result<(BlockModel<S>, ArchConfig)> {
    let file = read_file(path)?;
    check_hash(&file, config_hash);
    let arch = arch_from_meta(&file)?;
    let mut model = crate::nets::build_tiny_model(&arch).map_err(|e| CheckpointError::Meta {
        key: "arch".into(),
        msg: e.to_string(),
    })?;
    load_tensors_into(&mut model, &file)?;
    Ok((model, arch))
}

pub fn save_transform<S: Scalar>(t: &TransformNet<S>, path: &Path) -> Result<()> {
    let mut file = TensorFile::default();
    file.meta.insert("kind".into(), "transform".into());
    file.meta.insert("unet.channels".into(), t.cfg.channels.to_string());
    file.meta.insert("unet.base_width".into(), t.cfg.base_width.to_string());
    file.meta.insert("unet.seed".into(), t.cfg.seed.to_string());
    for (i, p) in t.params().iter().enumerate() {
        file.push_tensor(&format!("t.{i}"), p);
    }
    write_file(&file, path)
}

pub fn load_transform<S: Scalar>(path: &Path) -> Result<TransformNet<S>> {
    let file = read_file(path)?;
    let cfg = UNetConfig {
        channels: file.meta_parse("unet.channels")?,
        base_width: file.meta_parse("unet.base_width")?,
        seed: file.meta_parse("unet.seed")?,
    };
    let mut t = TransformNet::new(cfg);
    let params = t
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| file.tensor(&format!("t.{i}"), p.shape()))
        .collect::<Result<Vec<_>>>()?;
    t.set_params(params);
    Ok(t)
}

fn bits_meta(key: &str, raw: u32) -> Result<Bits> {
    Bits::new(raw).map_err(|e| CheckpointError::Meta {
        key: key.to_string(),
        msg: e.to_string(),
    })
}

/// Saves a quantized twin: the full-precision tensors plus every quantizer.
pub fn save_quantized<S: Scalar>(
    q: &QuantizedModel<S>,
    arch: &ArchConfig,
    config_hash: Option<&str>,
    path: &Path,
) -> Result<()> {
    let mut file = model_file(&q.fp, arch, config_hash);
    file.meta.insert("kind".into(), "quantized-model".into());
    file.meta.insert("q.w_bits".into(), q.cfg.w_bits.get().to_string());
    file.meta.insert("q.a_bits".into(), q.cfg.a_bits.get().to_string());
    file.meta.insert("q.eight_bit_edges".into(), q.cfg.eight_bit_edges.to_string());
    file.meta.insert("q.second_layer_act_8bit".into(), q.cfg.second_layer_act_8bit.to_string());
    file.meta.insert("q.per_channel".into(), q.cfg.per_channel.to_string());
    for (l, b) in q.blocks.iter().enumerate() {
        for (i, w) in b.weights.iter().enumerate() {
            file.push_tensor(&format!("q.block{l}.w{i}.scale"), &w.scale);
            file.push_tensor(&format!("q.block{l}.w{i}.v"), &w.v);
            file.meta.insert(format!("q.block{l}.w{i}.hardened"), w.hardened.to_string());
        }
        if let Some(a) = &b.act_in {
            file.push_tensor(&format!("q.block{l}.act_in.scale"), &a.scale);
        }
        if let Some(a) = &b.act_mid {
            file.push_tensor(&format!("q.block{l}.act_mid.scale"), &a.scale);
        }
    }
    if let Some((s, _)) = &q.head_w {
        file.push_tensor("q.head.scale", s);
    }
    if let Some(a) = &q.head_act {
        file.push_tensor("q.head.act.scale", &a.scale);
    }
    write_file(&file, path)
}

/// Loads a file written by [`save_quantized`].
pub fn load_quantized<S: Scalar>(path: &Path, config_hash: Option<&str>) -> Result<(QuantizedModel<S>, ArchConfig)> {
    let file = read_file(path)?;
    check_hash(&file, config_hash);
    let arch = arch_from_meta(&file)?;
    let mut fp: BlockModel<S> = crate::nets::build_tiny_model(&arch).map_err(|e| CheckpointError::Meta {
        key: "arch".into(),
        msg: e.to_string(),
    })?;
    load_tensors_into(&mut fp, &file)?;
    let cfg = QuantConfig {
        w_bits: bits_meta("q.w_bits", file.meta_parse("q.w_bits")?)?,
        a_bits: bits_meta("q.a_bits", file.meta_parse("q.a_bits")?)?,
        eight_bit_edges: file.meta_parse("q.eight_bit_edges")?,
        second_layer_act_8bit: file.meta_parse("q.second_layer_act_8bit")?,
        per_channel: file.meta_parse("q.per_channel")?,
    };
    // Structure (bit-widths, sites) comes from a throwaway initialization.
    let mut shape = vec![1];
    shape.extend_from_slice(&fp.input_shape);
    let probe = Tensor::full(&shape, S::lit(0.5));
    let mut q = QuantizedModel::init(&fp, cfg, &probe).map_err(|e| CheckpointError::Meta {
        key: "q".into(),
        msg: e.to_string(),
    })?;
    for (l, b) in q.blocks.iter_mut().enumerate() {
        for (i, w) in b.weights.iter_mut().enumerate() {
            w.scale = file.tensor(&format!("q.block{l}.w{i}.scale"), w.scale.shape())?;
            w.v = file.tensor(&format!("q.block{l}.w{i}.v"), w.v.shape())?;
            w.hardened = file.meta_parse(&format!("q.block{l}.w{i}.hardened"))?;
        }
        if let Some(a) = &mut b.act_in {
            a.scale = file.tensor(&format!("q.block{l}.act_in.scale"), &[1])?;
        }
        if let Some(a) = &mut b.act_mid {
            a.scale = file.tensor(&format!("q.block{l}.act_mid.scale"), &[1])?;
        }
    }
    if let Some((s, _)) = &mut q.head_w {
        *s = file.tensor("q.head.scale", &[1])?;
    }
    if let Some(a) = &mut q.head_act {
        a.scale = file.tensor("q.head.act.scale", &[1])?;
    }
    Ok((q, arch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile {
            config_hash: Some("abc".into()),
            ..TensorFile::default()
        };
        f.meta.insert("k".into(), "some value".into());
        f.push("a.weight", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]);
        f.push("b", vec![], vec![7.0]);
        f
    }

    #[test]
    fn bytes_round_trip() {
        let f = sample();
        let bytes = f.to_bytes();
        let g = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(g, f);
        assert_eq!(g.to_bytes(), bytes);
        assert_eq!(g.get("a.weight").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = sample().to_bytes();
        let r = TensorFile::from_bytes(&bytes[..bytes.len() - 3]);
        assert!(matches!(r, Err(CheckpointError::Length { .. })));
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("metaptq-tensors 1", "metaptq-tensors 9", 1);
        let r = TensorFile::from_bytes(text.as_bytes());
        assert!(matches!(r, Err(CheckpointError::Version { .. })));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let f = sample();
        let err = f.tensor::<f64>("a.weight", &[4]).unwrap_err();
        assert!(err.to_string().contains("a.weight"));
    }
}
