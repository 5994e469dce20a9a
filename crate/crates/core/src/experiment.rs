//! Named architectures and datasets, shared by the command line and the
//! long-running acceptance runs so both build identical experiments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{load_idx_dataset, split_train_val, synthetic_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{build_lenet300, build_lenet5, Model};
use crate::tensor::Tensor;
use crate::train::Splits;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Lenet300,
    Lenet5,
}

impl Arch {
    pub fn build(self, seed: u64) -> Result<Model> {
        match self {
            Self::Lenet300 => build_lenet300(seed),
            Self::Lenet5 => build_lenet5(seed),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet300" => Ok(Self::Lenet300),
            "lenet5" => Ok(Self::Lenet5),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected lenet300 or lenet5)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lenet300 => "lenet300",
            Self::Lenet5 => "lenet5",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" => Ok(Self::FashionMnist),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected mnist, fashion-mnist or synthetic)"
            ))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Synthetic => "synthetic",
        })
    }
}

impl DatasetKind {
    /// Sub-directory of the data root holding the IDX files.
    pub fn subdir(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Synthetic => "",
        }
    }
}

/// Synthetic task: 10 overlapping Gaussian blobs in 16 dimensions, 200
/// training and 50 test samples per class. The overlap makes the classes
/// inseparable, so validation loss plateaus instead of creeping down forever.
pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_DIM: usize = 16;
pub const SYNTHETIC_TRAIN_PER_CLASS: usize = 200;
pub const SYNTHETIC_TEST_PER_CLASS: usize = 50;
pub const SYNTHETIC_SEPARATION: f64 = 3.0;
pub const SYNTHETIC_VAL_SIZE: usize = 400;

/// Train and test halves of the synthetic task, as flat `[16]` samples.
pub fn synthetic_task(seed: u64) -> Result<(Dataset, Dataset)> {
    let per_class = SYNTHETIC_TRAIN_PER_CLASS + SYNTHETIC_TEST_PER_CLASS;
    let all = synthetic_blobs(per_class, SYNTHETIC_CLASSES, SYNTHETIC_DIM, SYNTHETIC_SEPARATION, seed)?;
    let cut = SYNTHETIC_TRAIN_PER_CLASS * SYNTHETIC_CLASSES;
    let train: Vec<usize> = (0..cut).collect();
    let test: Vec<usize> = (cut..all.len()).collect();
    Ok((all.subset(&train, Split::Train)?, all.subset(&test, Split::Test)?))
}

/// Places each 16-feature sample in the central 4×4 patch of an otherwise
/// zero `[1, 28, 28]` image, so the LeNet architectures accept it.
pub fn embed_in_image(data: &Dataset) -> Result<Dataset> {
    let n = data.len();
    let mut pixels = vec![0.0; n * 784];
    for (i, sample) in data.pixels().chunks(SYNTHETIC_DIM).enumerate() {
        for (k, &v) in sample.iter().enumerate() {
            pixels[i * 784 + (12 + k / 4) * 28 + 12 + k % 4] = v;
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], pixels)?, data.labels().to_vec(), data.split())
}

/// Loads train/validation/test for `kind`. `data_root` holds one directory
/// per dataset (`mnist/`, `fashion-mnist/`); `train_limit` keeps only the
/// first samples of the training file before the validation split.
pub fn load_splits(
    kind: DatasetKind,
    data_root: &Path,
    val_size: usize,
    train_limit: Option<usize>,
    seed: u64,
) -> Result<Splits> {
    let (mut full, test) = match kind {
        DatasetKind::Synthetic => {
            let (train, test) = synthetic_task(seed)?;
            (embed_in_image(&train)?, embed_in_image(&test)?)
        }
        _ => {
            let dir = data_root.join(kind.subdir());
            (
                load_idx_dataset(&dir, Split::Train)?,
                load_idx_dataset(&dir, Split::Test)?,
            )
        }
    };
    if let Some(limit) = train_limit.filter(|&l| l < full.len()) {
        let keep: Vec<usize> = (0..limit).collect();
        full = full.subset(&keep, Split::Train)?;
    }
    let (train, validation) = split_train_val(&full, val_size, seed)?;
    Ok(Splits {
        train,
        validation,
        test: Some(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in ["lenet300", "lenet5"] {
            assert_eq!(a.parse::<Arch>().unwrap().to_string(), a);
        }
        for d in ["mnist", "fashion-mnist", "synthetic"] {
            assert_eq!(d.parse::<DatasetKind>().unwrap().to_string(), d);
        }
        assert!("lenet7".parse::<Arch>().is_err());
        assert!("cifar".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn synthetic_splits() {
        let s = load_splits(DatasetKind::Synthetic, Path::new("/nonexistent"), 400, None, 3).unwrap();
        assert_eq!(s.train.len(), 1600);
        assert_eq!(s.validation.len(), 400);
        assert_eq!(s.test.as_ref().unwrap().len(), 500);
        assert_eq!(s.train.sample_shape(), &[1, 28, 28]);
    }

    #[test]
    fn embedding_keeps_every_feature() {
        let (train, _) = synthetic_task(1).unwrap();
        let img = embed_in_image(&train).unwrap();
        for i in [0, 7, train.len() - 1] {
            let flat = &train.pixels()[i * SYNTHETIC_DIM..(i + 1) * SYNTHETIC_DIM];
            let pix = &img.pixels()[i * 784..(i + 1) * 784];
            let mut kept: Vec<f64> = pix.iter().copied().filter(|v| *v != 0.0).collect();
            let mut want: Vec<f64> = flat.iter().copied().filter(|v| *v != 0.0).collect();
            kept.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            assert_eq!(kept, want);
        }
        assert_eq!(img.labels(), train.labels());
    }
}
