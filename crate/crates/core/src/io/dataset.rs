//! Labelled datasets: IDX files and synthetic Gaussian blobs.
//!
//! IDX headers are big-endian: magic `0x00000803` with count, rows and
//! columns for images; magic `0x00000801` with count for labels. Pixels are
//! u8 and load as `pixel / 255`, shaped `[1, rows, cols]`.

use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::error::FormatError;
use crate::io::{read_file, Reader};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<(Tensor, usize)>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            samples: self.samples[..n.min(self.len())].to_vec(),
            classes: self.classes,
        }
    }

    /// Up to `n` samples drawn without replacement, kept in dataset order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        let mut picks = index::sample(&mut crate::derive_rng(seed, &[]), self.len(), n.min(self.len())).into_vec();
        picks.sort_unstable();
        Dataset {
            samples: picks.into_iter().map(|i| self.samples[i].clone()).collect(),
            classes: self.classes,
        }
    }
}

/// Decodes an IDX image file into `(rows, cols, pixels)` per image.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>), FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(&IMAGES_MAGIC.to_be_bytes())?;
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if rows == 0 || cols == 0 {
        return Err(FormatError::Malformed {
            offset: 8,
            reason: format!("image size {rows}x{cols}"),
        });
    }
    let mut images = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        images.push(r.take(rows * cols)?.to_vec());
    }
    r.finish()?;
    Ok((rows, cols, images))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(&LABELS_MAGIC.to_be_bytes())?;
    let n = r.u32_be()? as usize;
    let labels = r.take(n)?.to_vec();
    r.finish()?;
    Ok(labels)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, FormatError> {
    let (rows, cols, pixels) = decode_idx_images(images)?;
    let labels = decode_idx_labels(labels)?;
    if pixels.len() != labels.len() {
        return Err(FormatError::CountMismatch {
            images: pixels.len(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let samples = pixels
        .into_iter()
        .zip(labels)
        .map(|(img, label)| {
            let data = img.into_iter().map(|p| p as f32 / 255.0).collect();
            (Tensor::new(vec![1, rows, cols], data).expect("non-empty image"), label as usize)
        })
        .collect();
    Ok(Dataset { samples, classes })
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, FormatError> {
    decode_idx(&read_file(images.as_ref())?, &read_file(labels.as_ref())?)
}

/// Mean of class `c` in coordinate `d`: `±spread`, the sign taken from bit
/// `d mod b` of `c` where `b = max(1, ceil(log2 classes))`.
pub fn class_mean(classes: usize, c: usize, d: usize, spread: f64) -> f64 {
    let bits = (usize::BITS - classes.saturating_sub(1).leading_zeros()).max(1) as usize;
    if (c >> (d % bits)) & 1 == 1 {
        spread
    } else {
        -spread
    }
}

/// Unit-variance Gaussian blobs around [`class_mean`] with spread 3,
/// interleaved by class.
pub fn synth_dataset(classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
    synth_dataset_with_spread(classes, per_class, dim, seed, 3.0)
}

pub fn synth_dataset_with_spread(classes: usize, per_class: usize, dim: usize, seed: u64, spread: f64) -> Dataset {
    let mut rng = crate::derive_rng(seed, &[]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for c in 0..classes {
            let data = (0..dim)
                .map(|d| (class_mean(classes, c, d, spread) + noise.sample(&mut rng)) as f32)
                .collect();
            samples.push((Tensor::new(vec![dim], data).expect("positive dimension"), c));
        }
    }
    Dataset { samples, classes }
}
