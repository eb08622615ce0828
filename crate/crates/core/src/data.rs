//! Labeled image datasets: the CIFAR-10 binary reader and a seeded synthetic
//! generator of Gaussian class blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::{hash_json, rng_for};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Images in `[0, 1]` with class labels.
///
/// Labels are stored as class indices, which makes the one-hot invariant
/// (exactly one active entry per row) hold by construction; [`one_hot`]
/// produces the indicator matrix.
///
/// [`one_hot`]: LabeledDataset::one_hot
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.n(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.num_classes);
        for (i, &l) in self.labels.iter().enumerate() {
            m[(i, l)] = 1.0;
        }
        m
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(LabeledDataset {
            images: self.images.select_samples(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn truncate(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Train and test splits with an identifier used for provenance and caching.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub id: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Parses CIFAR-10 binary records: one label byte, then the R, G and B
/// planes (1024 bytes each, row-major 32x32). Any whole number of records is
/// accepted.
pub fn parse_cifar10(bytes: &[u8], source: &Path) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format {
            path: source.to_path_buf(),
            reason: format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                path: source.to_path_buf(),
                reason: format!("label byte {label} out of range"),
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::from_vec(n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE, data)?;
    LabeledDataset::new(images, labels, CIFAR_CLASSES)
}

pub fn read_cifar10_file(path: &Path) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_cifar10(&fs::read(path)?, path)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`, keeping at
/// most `train_limit` / `test_limit` samples.
pub fn load_cifar10_dir(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    let mut have = 0;
    for i in 1..=5 {
        if train_limit.is_some_and(|l| have >= l) {
            break;
        }
        let part = read_cifar10_file(&dir.join(format!("data_batch_{i}.bin")))?;
        have += part.len();
        labels.extend_from_slice(&part.labels);
        parts.push(part.images);
    }
    let train = LabeledDataset::new(Tensor::concat(&parts)?, labels, CIFAR_CLASSES)?;
    let train = match train_limit {
        Some(l) => train.truncate(l)?,
        None => train,
    };
    let test = read_cifar10_file(&dir.join("test_batch.bin"))?;
    let test = match test_limit {
        Some(l) => test.truncate(l)?,
        None => test,
    };
    Ok((train, test))
}

/// Seeded Gaussian class blobs rendered into `channels x height x width`
/// images.
///
/// Each of the first `informative_channels` channels of class `k` shows a
/// Gaussian bump at a class-specific position; the remaining channels are
/// label-independent texture. Every pixel gets independent noise and is
/// clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub informative_channels: usize,
    pub amplitude: f64,
    pub blob_width: f64,
    pub pixel_noise: f64,
    pub texture_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Blobs in every channel, 3x16x16, 4 classes.
    pub fn blobs(seed: u64) -> Self {
        SyntheticSpec {
            classes: 4,
            channels: 3,
            height: 16,
            width: 16,
            n_train: 400,
            n_test: 200,
            informative_channels: 3,
            amplitude: 0.35,
            blob_width: 2.5,
            pixel_noise: 0.15,
            texture_noise: 0.0,
            seed,
        }
    }

    /// Matches [`crate::zoo::planted_net`]: 3x8x8, class signal in channel 0
    /// only, texture in channels 1 and 2.
    pub fn planted(seed: u64) -> Self {
        SyntheticSpec {
            classes: 4,
            channels: 3,
            height: 8,
            width: 8,
            n_train: 400,
            n_test: 200,
            informative_channels: 1,
            amplitude: 0.3,
            blob_width: 1.5,
            pixel_noise: 0.1,
            texture_noise: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("empty image shape".into()));
        }
        if self.informative_channels > self.channels {
            return Err(Error::InvalidArgument(
                "more informative channels than channels".into(),
            ));
        }
        let finite = [self.amplitude, self.blob_width, self.pixel_noise, self.texture_noise];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.blob_width == 0.0 {
            return Err(Error::InvalidArgument(
                "amplitude, widths and noise levels must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SplitDataset> {
        self.validate()?;
        let (c, h, w) = (self.channels, self.height, self.width);
        // Class templates.
        let mut templates = vec![0.0; self.classes * c * h * w];
        for k in 0..self.classes {
            for ch in 0..self.informative_channels {
                let mut rng = rng_for(self.seed, "synthetic/template", (k * c + ch) as u64);
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        templates[((k * c + ch) * h + y) * w + x] =
                            self.amplitude * (-d2 / (2.0 * self.blob_width.powi(2))).exp();
                    }
                }
            }
        }
        let train = self.render(&templates, self.n_train, "synthetic/train")?;
        let test = self.render(&templates, self.n_test, "synthetic/test")?;
        Ok(SplitDataset {
            id: format!("synthetic-{:016x}", hash_json(self)),
            train,
            test,
        })
    }

    fn render(&self, templates: &[f64], n: usize, stream: &str) -> Result<LabeledDataset> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let plane = c * h * w;
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng_for(self.seed, stream, u64::MAX));
        let pixel = Normal::new(0.0, self.pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
        let texture = Normal::new(0.0, self.texture_noise.max(f64::MIN_POSITIVE)).unwrap();
        let mut data = vec![0.0; n * plane];
        for (i, &k) in labels.iter().enumerate() {
            let mut rng = rng_for(self.seed, stream, i as u64);
            let img = &mut data[i * plane..(i + 1) * plane];
            for ch in 0..c {
                for p in 0..h * w {
                    let v = if ch < self.informative_channels {
                        0.35 + templates[k * plane + ch * h * w + p] + pixel.sample(&mut rng)
                    } else {
                        0.5 + texture.sample(&mut rng)
                    };
                    img[ch * h * w + p] = v.clamp(0.0, 1.0);
                }
            }
        }
        LabeledDataset::new(Tensor::from_vec(n, c, h, w, data)?, labels, self.classes)
    }
}

/// Where a dataset comes from; serialized as the `--dataset` descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn load(&self) -> Result<SplitDataset> {
        match self {
            DatasetSource::Cifar10 {
                dir,
                train_limit,
                test_limit,
            } => {
                let (train, test) = load_cifar10_dir(dir, *train_limit, *test_limit)?;
                Ok(SplitDataset {
                    id: format!("cifar10-{:016x}", hash_json(self)),
                    train,
                    test,
                })
            }
            DatasetSource::Synthetic(spec) => spec.generate(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut source: DatasetSource = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if let DatasetSource::Cifar10 { dir, .. } = &mut source {
            if dir.is_relative() {
                if let Some(parent) = path.parent() {
                    *dir = parent.join(&*dir);
                }
            }
        }
        Ok(source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_known_records() {
        let mut bytes = Vec::new();
        for (label, base) in [(3u8, 0u8), (0, 100), (9, 255)] {
            bytes.push(label);
            for plane in 0..3u32 {
                for p in 0..1024u32 {
                    bytes.push(base.wrapping_add(((plane * 7 + p) % 5) as u8));
                }
            }
        }
        let ds = parse_cifar10(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ds.labels, vec![3, 0, 9]);
        assert_eq!(ds.images.dims(), (3, 3, 32, 32));
        // Record 1, green plane (1), row 2, col 5 -> p = 69.
        let expected = (100 + (7 + 69) % 5) as f64 / 255.0;
        assert_eq!(ds.images.get(1, 1, 2, 5), expected);
        assert_eq!(ds.images.get(2, 0, 0, 0), 255.0 / 255.0);
        assert_eq!(ds.images.get(0, 2, 31, 31), ((14 + 1023) % 5) as f64 / 255.0);
    }

    #[test]
    fn rejects_partial_records_and_bad_labels() {
        assert!(parse_cifar10(&[0u8; 100], Path::new("x")).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
        rec[0] = 10;
        assert!(parse_cifar10(&rec, Path::new("x")).is_err());
    }

    #[test]
    fn synthetic_is_seeded_balanced_and_in_range() {
        let spec = SyntheticSpec::blobs(3);
        let a = spec.generate().unwrap();
        assert_eq!(a, spec.generate().unwrap());
        assert_ne!(a.train.images, SyntheticSpec::blobs(4).generate().unwrap().train.images);
        assert_eq!(a.train.class_counts(), vec![100; 4]);
        assert!(a.train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let oh = a.train.one_hot();
        for i in 0..a.train.len() {
            assert_eq!(oh.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn descriptor_round_trips_through_json() {
        let src = DatasetSource::Synthetic(SyntheticSpec::planted(1));
        let text = serde_json::to_string(&src).unwrap();
        assert!(text.contains("\"kind\":\"synthetic\""));
        let back: DatasetSource = serde_json::from_str(&text).unwrap();
        assert_eq!(back, src);
    }
}
