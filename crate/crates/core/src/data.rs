//! Labeled image sets: seeded synthetic generators, raw-tensor directories,
//! train/test splitting and calibration sampling.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, TensorFile};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data spec: {0}")]
    Spec(String),
    #[error("malformed tensor file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error(transparent)]
    Container(#[from] CheckpointError),
    #[error("empty {0} set")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images `[N, C, H, W]` with one class label each.
#[derive(Debug, Clone)]
pub struct LabeledSet<S: Scalar> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<S: Scalar> LabeledSet<S> {
    pub fn new(images: Tensor<S>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(DataError::Spec(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Spec(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }
}

/// Unlabeled calibration images drawn from the training split.
#[derive(Debug, Clone)]
pub struct CalibrationSet<S: Scalar> {
    pub images: Tensor<S>,
    /// Positions of the images inside the training split.
    pub train_indices: Vec<usize>,
}

impl<S: Scalar> CalibrationSet<S> {
    pub fn len(&self) -> usize {
        self.train_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_indices.is_empty()
    }

    /// The calibration images with their training labels, for accuracy on
    /// the calibration set.
    pub fn labeled(&self, train: &LabeledSet<S>) -> LabeledSet<S> {
        LabeledSet {
            images: self.images.clone(),
            labels: self.train_indices.iter().map(|&i| train.labels[i]).collect(),
            classes: train.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Oriented gratings with class-dependent orientation, frequency and tint.
    Textures,
    /// Gaussian blobs at class-dependent positions and colors.
    Blobs,
    /// A directory holding `train.mptq` and `test.mptq` tensor files.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    /// Images held out for testing; the rest form the training split.
    pub test_size: usize,
    pub calib_size: usize,
    pub image_size: usize,
    /// Standard deviation of the per-pixel noise of the synthetic generators.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Textures,
            classes: 10,
            per_class: 600,
            test_size: 1000,
            calib_size: 256,
            image_size: 32,
            noise: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub train: LabeledSet<S>,
    pub test: LabeledSet<S>,
    pub calib: CalibrationSet<S>,
}

fn gaussian<R: Rng>(rng: &mut R, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("finite").sample(rng)
    } else {
        0.0
    }
}

/// Per-class tint: three channel gains in `[0.35, 1]`.
fn tint(class: usize) -> [f64; 3] {
    let t = class as f64 * 2.0 * PI / 7.0;
    [
        0.675 + 0.325 * t.cos(),
        0.675 + 0.325 * (t + 2.0 * PI / 3.0).cos(),
        0.675 + 0.325 * (t + 4.0 * PI / 3.0).cos(),
    ]
}

fn render_texture<R: Rng>(rng: &mut R, class: usize, classes: usize, size: usize, noise: f64, out: &mut Vec<f64>) {
    let theta = PI * (class % 5) as f64 / 5.0 + gaussian(rng, 0.08);
    let freq = if (class / 5) % 2 == 0 { 2.5 } else { 5.0 } * (1.0 + gaussian(rng, 0.08));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.25..0.45);
    let c = tint(class * 7 / classes.max(1));
    let (dx, dy) = (theta.cos(), theta.sin());
    for gain in c {
        let bright = 0.5 + gaussian(rng, 0.05);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * dx + y as f64 * dy) / size as f64;
                let v = bright + contrast * gain * (2.0 * PI * freq * u + phase).sin() + gaussian(rng, noise);
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
}

fn render_blob<R: Rng>(rng: &mut R, class: usize, classes: usize, size: usize, noise: f64, out: &mut Vec<f64>) {
    let angle = 2.0 * PI * class as f64 / classes as f64;
    let cx = 0.5 + 0.28 * angle.cos() + gaussian(rng, 0.04);
    let cy = 0.5 + 0.28 * angle.sin() + gaussian(rng, 0.04);
    let radius = 0.12 * (1.0 + gaussian(rng, 0.1)).max(0.5);
    let c = tint(class);
    for gain in c {
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 + 0.5) / size as f64 - cx, (y as f64 + 0.5) / size as f64 - cy);
                let b = (-(u * u + v * v) / (2.0 * radius * radius)).exp();
                out.push((0.1 + 0.8 * gain * b + gaussian(rng, noise)).clamp(0.0, 1.0));
            }
        }
    }
}

/// Renders `per_class` images of every class in class-major order.
pub fn synthesize<S: Scalar>(spec: &DataSpec) -> Result<LabeledSet<S>> {
    let render = match spec.source {
        DataSource::Textures => render_texture::<ChaCha8Rng>,
        DataSource::Blobs => render_blob::<ChaCha8Rng>,
        DataSource::Dir(_) => return Err(DataError::Spec("directory source is not synthetic".into())),
    };
    if spec.classes < 2 || spec.per_class == 0 || spec.image_size == 0 {
        return Err(DataError::Spec("need at least two classes and one image per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * 3 * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for _ in 0..spec.per_class {
            render(&mut rng, class, spec.classes, spec.image_size, spec.noise, &mut data);
            labels.push(class);
        }
    }
    let images = Tensor::raw(
        vec![n, 3, spec.image_size, spec.image_size],
        data.into_iter().map(S::lit).collect(),
    );
    LabeledSet::new(images, labels, spec.classes)
}

/// Two well-separated Gaussian clouds in `dim` dimensions.
pub fn separable_blobs<S: Scalar>(per_class: usize, dim: usize, seed: u64) -> LabeledSet<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * per_class * dim);
    let mut labels = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        let centre = if class == 0 { -2.0 } else { 2.0 };
        for _ in 0..per_class {
            for _ in 0..dim {
                data.push(S::lit(centre + gaussian(&mut rng, 0.5)));
            }
            labels.push(class);
        }
    }
    LabeledSet {
        images: Tensor::raw(vec![2 * per_class, dim], data),
        labels,
        classes: 2,
    }
}

fn read_split<S: Scalar>(path: &Path) -> Result<LabeledSet<S>> {
    let file = checkpoint::read_file(path)?;
    let malformed = |msg: String| DataError::Malformed {
        path: path.to_path_buf(),
        msg,
    };
    let images = file.get("images").ok_or_else(|| malformed("missing tensor `images`".into()))?;
    let labels = file.get("labels").ok_or_else(|| malformed("missing tensor `labels`".into()))?;
    if images.shape.len() != 4 || labels.shape != [images.shape[0]] {
        return Err(malformed(format!(
            "images {:?} and labels {:?} do not pair up",
            images.shape, labels.shape
        )));
    }
    let mut ys = Vec::with_capacity(labels.data.len());
    for &y in &labels.data {
        if y < 0.0 || y.fract() != 0.0 {
            return Err(malformed(format!("label {y} is not a class index")));
        }
        ys.push(y as usize);
    }
    let classes = ys.iter().max().map_or(0, |m| m + 1).max(2);
    let t = Tensor::from_f64(&images.shape, &images.data).map_err(|e| malformed(e.to_string()))?;
    LabeledSet::new(t, ys, classes)
}

/// Writes a labeled set in the format read by [`DataSource::Dir`].
pub fn write_split(set: &LabeledSet<f64>, path: &Path) -> Result<()> {
    let mut file = TensorFile::default();
    file.push("images", set.images.shape().to_vec(), set.images.to_vec());
    file.push(
        "labels",
        vec![set.len()],
        set.labels.iter().map(|&y| y as f64).collect(),
    );
    checkpoint::write_file(&file, path)?;
    Ok(())
}

/// Draws `size` distinct training indices under `seed`.
pub fn calibration_indices(train_len: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size > train_len {
        return Err(DataError::Spec(format!(
            "calibration size {size} must be in 1..={train_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11_b4a7e);
    let mut idx = rand::seq::index::sample(&mut rng, train_len, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Builds train/test splits and the calibration set.
pub fn load_dataset<S: Scalar>(spec: &DataSpec) -> Result<Dataset<S>> {
    let (train, test) = match &spec.source {
        DataSource::Dir(dir) => (read_split(&dir.join("train.mptq"))?, read_split(&dir.join("test.mptq"))?),
        _ => {
            let all = synthesize(spec)?;
            if spec.test_size >= all.len() {
                return Err(DataError::Spec(format!(
                    "test size {} leaves no training images out of {}",
                    spec.test_size,
                    all.len()
                )));
            }
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1)));
            let (test_idx, train_idx) = order.split_at(spec.test_size);
            (all.subset(train_idx), all.subset(test_idx))
        }
    };
    if train.is_empty() {
        return Err(DataError::Empty("training"));
    }
    if test.is_empty() {
        return Err(DataError::Empty("test"));
    }
    let idx = calibration_indices(train.len(), spec.calib_size, spec.seed)?;
    let calib = CalibrationSet {
        images: train.images.select_rows(&idx),
        train_indices: idx,
    };
    Ok(Dataset { train, test, calib })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(source: DataSource) -> DataSpec {
        DataSpec {
            source,
            classes: 3,
            per_class: 4,
            test_size: 3,
            calib_size: 5,
            image_size: 8,
            ..DataSpec::default()
        }
    }

    #[test]
    fn split_sizes_and_ranges() {
        for src in [DataSource::Textures, DataSource::Blobs] {
            let d = load_dataset::<f64>(&small(src)).unwrap();
            assert_eq!(d.train.len(), 9);
            assert_eq!(d.test.len(), 3);
            assert_eq!(d.calib.len(), 5);
            assert!(d.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn calibration_is_seeded() {
        let a = calibration_indices(100, 10, 4).unwrap();
        assert_eq!(a, calibration_indices(100, 10, 4).unwrap());
        assert_ne!(a, calibration_indices(100, 10, 5).unwrap());
        assert!(calibration_indices(5, 6, 0).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_dataset::<f64>(&small(DataSource::Textures)).unwrap();
        write_split(&d.train, &dir.path().join("train.mptq")).unwrap();
        write_split(&d.test, &dir.path().join("test.mptq")).unwrap();
        let spec = DataSpec {
            source: DataSource::Dir(dir.path().to_path_buf()),
            ..small(DataSource::Textures)
        };
        let e = load_dataset::<f64>(&spec).unwrap();
        assert!(e.train.images.bit_eq(&d.train.images));
        assert_eq!(e.test.labels, d.test.labels);
    }

    #[test]
    fn missing_directory_is_an_error() {
        let spec = small(DataSource::Dir("/nonexistent/metaptq".into()));
        assert!(load_dataset::<f64>(&spec).is_err());
    }
}
