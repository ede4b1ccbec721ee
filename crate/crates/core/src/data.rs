//! Datasets: the CIFAR-10 binary format, a seeded synthetic set, horizontal-flip
//! augmentation and shuffled batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by the R, G and B planes, row-major.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

/// In-memory image classification set, pixels in `[0, 1]`, stored NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, classes: usize, dims: [usize; 3]) -> Result<Self> {
        let [channels, height, width] = dims;
        let per = channels * height * width;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} pixel values do not form {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[channels, height, width]`.
    pub fn image_dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    /// Images `indices` stacked into one tensor, mirrored where `flip[j]` is set.
    pub fn gather<T: Element>(&self, indices: &[usize], flip: Option<&[bool]>) -> Result<(Tensor4<T>, Vec<usize>)> {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut scratch = vec![0f32; per];
        for (j, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range for {} samples", self.len())));
            }
            scratch.copy_from_slice(self.image(i));
            if flip.is_some_and(|f| f[j]) {
                hflip(&mut scratch, self.width);
            }
            data.extend(scratch.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let t = Tensor4::from_dims([indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `per_class` samples of every class, in dataset order.
    pub fn subset_per_class(&self, per_class: usize) -> Result<Self> {
        let mut taken = vec![0usize; self.classes];
        let mut keep = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if taken[l] < per_class {
                taken[l] += 1;
                keep.push(i);
            }
        }
        if let Some(c) = taken.iter().position(|&t| t < per_class) {
            return Err(Error::Data(format!("class {c} has only {} samples, wanted {per_class}", taken[c])));
        }
        self.select(&keep)
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut images = Vec::new();
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range")));
            }
            images.extend_from_slice(self.image(i));
        }
        Ok(Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
        })
    }

    /// Concatenates sets with identical image dimensions and class counts.
    pub fn concat(parts: Vec<Self>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut out = iter.next().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        for p in iter {
            if p.image_dims() != out.image_dims() || p.classes != out.classes {
                return Err(Error::Data("cannot concatenate datasets of different shapes".into()));
            }
            out.images.extend(p.images);
            out.labels.extend(p.labels);
        }
        Ok(out)
    }
}

/// Mirrors every row of a CHW image in place.
pub fn hflip(image: &mut [f32], width: usize) {
    for row in image.chunks_mut(width) {
        row.reverse();
    }
}

/// Mirrors `image` when the coin lands heads (probability 1/2).
pub fn augment_hflip<R: Rng>(image: &mut [f32], width: usize, coin: &mut R) -> bool {
    let heads = coin.gen_bool(0.5);
    if heads {
        hflip(image, width);
    }
    heads
}

/// Decodes concatenated CIFAR-10 records.
pub fn decode_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "length {} is not a positive multiple of the {CIFAR_RECORD}-byte record size",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!("record {i} has label {label} (must be < {CIFAR_CLASSES})")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, CIFAR_CLASSES, [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE])
}

/// Encodes a 3x32x32, at most 10-class set as CIFAR-10 records (pixels rounded to bytes).
pub fn encode_cifar(data: &Dataset) -> Result<Vec<u8>> {
    if data.image_dims() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] || data.classes > CIFAR_CLASSES {
        return Err(Error::Data(format!(
            "CIFAR records hold 3x32x32 images of at most 10 classes, got {:?} with {} classes",
            data.image_dims(),
            data.classes
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend(data.image(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn load_cifar_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_cifar_binary(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, encode_cifar(data)?).map_err(|e| Error::io(path, e))
}

/// Locates the CIFAR-10 binary batches under `root` (or `root/cifar-10-batches-bin`).
pub fn cifar10_files(root: &Path) -> Result<(Vec<PathBuf>, PathBuf)> {
    for dir in [root.to_path_buf(), root.join("cifar-10-batches-bin")] {
        let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
        let test = dir.join("test_batch.bin");
        if test.is_file() && train.iter().all(|p| p.is_file()) {
            return Ok((train, test));
        }
    }
    Err(Error::Data(format!(
        "no CIFAR-10 binaries (data_batch_1..5.bin, test_batch.bin) under {}",
        root.display()
    )))
}

/// Train and test splits of CIFAR-10 from `root`.
pub fn load_cifar10(root: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = cifar10_files(root)?;
    let parts = train.iter().map(|p| load_cifar_binary(p)).collect::<Result<Vec<_>>>()?;
    Ok((Dataset::concat(parts)?, load_cifar_binary(&test)?))
}

/// Seeded toy set: class `c` is a linear ramp oriented at angle `pi * c / classes`,
/// plus uniform noise in `[-noise, noise]`, clamped to `[0, 1]`. Labels cycle `0, 1, ...`.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, size: usize, noise: f32) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
    }
    if size == 0 {
        return Err(Error::Data("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = (size as f32 - 1.0) / 2.0;
    let span = size.max(2) as f32 - 1.0;
    let patterns: Vec<Vec<f32>> = (0..classes)
        .map(|c| {
            let theta = std::f32::consts::PI * c as f32 / classes as f32;
            let (sin, cos) = theta.sin_cos();
            let mut plane = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let t = ((x as f32 - centre) * cos + (y as f32 - centre) * sin) / span;
                    plane.push((0.5 + 0.8 * t).clamp(0.0, 1.0));
                }
            }
            plane
        })
        .collect();
    let mut images = Vec::with_capacity(n * CIFAR_CHANNELS * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        for _ in 0..CIFAR_CHANNELS {
            for &base in &patterns[label] {
                let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
                images.push((base + jitter).clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(images, labels, classes, [CIFAR_CHANNELS, size, size])
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor4<T>,
    pub labels: Vec<usize>,
}

/// Epoch order: a seeded shuffle (or identity), split into chunks of `batch_size`
/// with a trailing partial batch, plus per-sample flip coins when augmenting.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub flips: Vec<bool>,
    pub batch_size: usize,
}

impl EpochPlan {
    pub fn shuffled(n: usize, batch_size: usize, epoch_seed: u64, augment: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let flips = if augment {
            let mut coin = ChaCha8Rng::seed_from_u64(epoch_seed ^ 0x5EED_F11F);
            (0..n).map(|_| coin.gen_bool(0.5)).collect()
        } else {
            vec![false; n]
        };
        Ok(Self { order, flips, batch_size })
    }

    pub fn sequential(n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(Self {
            order: (0..n).collect(),
            flips: vec![false; n],
            batch_size,
        })
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn batches<'a, T: Element>(&'a self, data: &'a Dataset) -> impl Iterator<Item = Result<Batch<T>>> + 'a {
        self.order
            .chunks(self.batch_size)
            .zip(self.flips.chunks(self.batch_size))
            .map(move |(idx, flips)| {
                let (images, labels) = data.gather(idx, Some(flips))?;
                Ok(Batch {
                    indices: idx.to_vec(),
                    images,
                    labels,
                })
            })
    }
}
