//! Datasets: IDX ingestion (MNIST, Fashion-MNIST), seeded train/validation
//! splitting, and synthetic Gaussian-blob tasks.
//!
//! Pixel bytes are scaled to `[0, 1]` by dividing by 255; no mean is
//! subtracted.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

/// Labelled samples stored contiguously, `len × sample_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    /// `images` has the sample count as its leading axis.
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() < 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let sample_shape = shape[1..].to_vec();
        Ok(Self {
            sample_shape,
            pixels: images.into_data(),
            labels,
            split,
        })
    }

    pub fn empty(sample_shape: &[usize], split: Split) -> Self {
        Self {
            sample_shape: sample_shape.to_vec(),
            pixels: Vec::new(),
            labels: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.sample_shape);
        shape
    }

    /// Samples `[start, end)` as one batch tensor.
    pub fn slice(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidShape {
                shape: self.batch_shape(self.len()),
                reason: format!("sample range {start}..{end} out of bounds"),
            });
        }
        let k = self.sample_len();
        Tensor::new(
            self.batch_shape(end - start),
            self.pixels[start * k..end * k].to_vec(),
        )
    }

    /// Gathers the given samples into a batch tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let k = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * k);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidShape {
                    shape: self.batch_shape(self.len()),
                    reason: format!("sample {i} out of bounds"),
                });
            }
            data.extend_from_slice(&self.pixels[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(self.batch_shape(indices.len()), data)?, labels))
    }

    /// Subset in the given index order, tagged with `split`.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        if indices.is_empty() {
            return Ok(Self::empty(&self.sample_shape, split));
        }
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, split)
    }

    /// Reinterprets every sample with a new shape of equal size.
    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(Error::ShapeMismatch {
                op: "reshape_samples",
                lhs: self.sample_shape,
                rhs: shape.to_vec(),
            });
        }
        self.sample_shape = shape.to_vec();
        Ok(self)
    }

    /// Mean and (population) standard deviation of all pixel values.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let n = self.pixels.len().max(1) as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        let var = self.pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// A decoded unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Parses an IDX buffer: big-endian magic, one big-endian `u32` per
/// dimension, then the unsigned-byte payload.
pub fn parse_idx(path: &Path, raw: &[u8]) -> Result<IdxArray> {
    let word = |at: usize| -> Result<u32> {
        raw.get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                expected: at + 4,
                actual: raw.len(),
            })
    };
    let magic = word(0)?;
    let ndims = match magic {
        IDX_LABELS_MAGIC => 1,
        IDX_IMAGES_MAGIC => 3,
        found => {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
            })
        }
    };
    let dims = (0..ndims)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if raw.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: raw.len(),
        });
    }
    if raw.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "{} trailing bytes after the payload",
                raw.len() - expected
            ),
        });
    }
    Ok(IdxArray {
        magic,
        dims,
        bytes: raw[header..].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let raw = fs::read(path)?;
    parse_idx(path, &raw)
}

/// Reads an IDX image file as `N × 1 × H × W`, scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let idx = read_idx(path)?;
    if idx.magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: idx.magic,
        });
    }
    let shape = vec![idx.dims[0], 1, idx.dims[1], idx.dims[2]];
    let data = idx.bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(shape, data)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let idx = read_idx(path)?;
    if idx.magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: idx.magic,
        });
    }
    Ok(idx.bytes.iter().map(|&b| usize::from(b)).collect())
}

/// Standard file names of an MNIST-layout directory.
pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Test => "t10k",
        _ => "train",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads the training or test half of an MNIST-layout directory
/// (MNIST and Fashion-MNIST share the layout).
pub fn load_idx_dataset(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images_path, labels_path) = idx_paths(dir.as_ref(), split);
    let images = read_idx_images(&images_path)?;
    let labels = read_idx_labels(&labels_path)?;
    if labels.iter().any(|&l| l > 9) {
        return Err(Error::Format {
            path: labels_path,
            reason: "labels must lie in [0, 9]".into(),
        });
    }
    Dataset::new(images, labels, split)
}

/// Seeded split of `0..n`: a permutation whose last `val_size` entries form
/// the validation indices. Both returned index lists are sorted.
pub fn split_indices(n: usize, val_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_size >= n && !(val_size == 0 && n == 0) {
        return Err(Error::Config(format!(
            "validation size {val_size} must be smaller than the {n} available samples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = perm.split_off(n - val_size);
    perm.sort_unstable();
    val.sort_unstable();
    Ok((perm, val))
}

/// Carves a validation set of `val_size` samples out of `train`.
pub fn split_train_val(train: &Dataset, val_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (keep, val) = split_indices(train.len(), val_size, seed)?;
    Ok((
        train.subset(&keep, Split::Train)?,
        train.subset(&val, Split::Validation)?,
    ))
}

/// Gaussian blobs with unit variance around seeded, well separated means.
///
/// When `classes ≤ dim` the means sit on distinct signed coordinate axes at
/// distance `separation / √2` from the origin, so any two means are exactly
/// `separation` apart. Otherwise they sit on a regular polygon in the first
/// two coordinates with adjacent means `separation` apart. Samples are
/// interleaved by class.
pub fn synthetic_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n_per_class == 0 {
        return Err(Error::Config(
            "synthetic blobs need ≥ 2 classes, dim ≥ 1 and ≥ 1 sample per class".into(),
        ));
    }
    if classes > dim && dim < 2 {
        return Err(Error::Config(format!(
            "{classes} classes do not fit in {dim} dimension"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![vec![0.0; dim]; classes];
    if classes <= dim {
        let mut axes: Vec<usize> = (0..dim).collect();
        axes.shuffle(&mut rng);
        let r = separation / std::f64::consts::SQRT_2;
        for (k, mean) in means.iter_mut().enumerate() {
            let sign = if rand::Rng::random::<bool>(&mut rng) {
                1.0
            } else {
                -1.0
            };
            mean[axes[k]] = sign * r;
        }
    } else {
        let step = std::f64::consts::TAU / classes as f64;
        let r = separation / (2.0 * (step / 2.0).sin());
        let phase = rand::Rng::random::<f64>(&mut rng) * step;
        for (k, mean) in means.iter_mut().enumerate() {
            let angle = phase + step * k as f64;
            mean[0] = r * angle.cos();
            mean[1] = r * angle.sin();
        }
    }
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for &m in &means[k] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut raw = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        raw.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        raw.extend_from_slice(labels);
        raw
    }

    #[test]
    fn parses_handcrafted_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        fs::write(&path, label_file(&[7, 2, 1])).unwrap();
        assert_eq!(read_idx_labels(&path).unwrap(), vec![7, 2, 1]);
    }

    #[test]
    fn parses_image_file_and_normalises() {
        let mut raw = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 2, 3] {
            raw.extend_from_slice(&d.to_be_bytes());
        }
        raw.extend((0..12).map(|v| (v * 20) as u8));
        raw[16 + 11] = 255;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images");
        fs::write(&path, &raw).unwrap();
        let t = read_idx_images(&path).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[11], 1.0);
        assert_eq!(t.data()[1], 20.0 / 255.0);
    }

    #[test]
    fn wrong_magic_reports_observed_value() {
        let mut raw = label_file(&[1]);
        raw[3] = 0x02;
        let err = parse_idx(Path::new("x"), &raw).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x802, .. }));
        assert!(err.to_string().contains("0x00000802"));
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let mut raw = label_file(&[1, 2, 3]);
        raw.pop();
        match parse_idx(Path::new("x"), &raw).unwrap_err() {
            Error::Truncated {
                expected, actual, ..
            } => assert_eq!((expected, actual), (11, 10)),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_idx(Path::new("x"), &raw[..6]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn split_is_disjoint_covering_and_seeded() {
        let (a, b) = split_indices(1000, 100, 3).unwrap();
        assert_eq!((a.len(), b.len()), (900, 100));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 100, 3).unwrap(), (a, b.clone()));
        assert_ne!(split_indices(1000, 100, 4).unwrap().1, b);
    }

    #[test]
    fn split_edge_cases() {
        let data = synthetic_blobs(5, 2, 3, 10.0, 0).unwrap();
        let (train, val) = split_train_val(&data, 0, 1).unwrap();
        assert!(val.is_empty());
        assert_eq!(train.pixels(), data.pixels());
        assert_eq!(train.labels(), data.labels());
        assert!(split_train_val(&data, 10, 1).is_err());
    }

    #[test]
    fn blobs_shapes_and_determinism() {
        let d = synthetic_blobs(7, 3, 2, 10.0, 11).unwrap();
        assert_eq!(d.len(), 21);
        assert_eq!(d.sample_shape(), &[2]);
        assert_eq!(d, synthetic_blobs(7, 3, 2, 10.0, 11).unwrap());
        assert_ne!(d, synthetic_blobs(7, 3, 2, 10.0, 12).unwrap());
        assert!(synthetic_blobs(7, 1, 2, 10.0, 11).is_err());
    }

    #[test]
    fn blob_means_are_separated() {
        for (classes, dim) in [(3, 2), (4, 8), (10, 784)] {
            let d = synthetic_blobs(400, classes, dim, 10.0, 5).unwrap();
            let mut means = vec![vec![0.0; dim]; classes];
            for (i, &l) in d.labels().iter().enumerate() {
                for (m, x) in means[l].iter_mut().zip(&d.pixels()[i * dim..(i + 1) * dim]) {
                    *m += x / 400.0;
                }
            }
            for a in 0..classes {
                for b in a + 1..classes {
                    let dist: f64 = means[a]
                        .iter()
                        .zip(&means[b])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist > 8.0, "classes {a},{b}: {dist}");
                }
            }
        }
    }
}
