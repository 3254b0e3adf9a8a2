//! Image datasets, preprocessing, intensity reversal and seeded batching.

pub mod idx;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DIGIT_CLASSES: usize = 10;

/// Labeled u8 images stored as `(count, height, width, channels)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixel bytes do not hold {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            channels,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }
}

/// Reads an idx3 image file and its idx1 label file as a 10-class grey dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let (count, rows, cols, pixels) = idx::parse_images(images_path, &idx::read(images_path)?)?;
    let labels = idx::parse_labels(labels_path, &idx::read(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::SizeMismatch {
            path: labels_path.into(),
            detail: format!(
                "{} labels for {count} images in {}",
                labels.len(),
                images_path.display()
            ),
        });
    }
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageDataset::new(
        name,
        (rows, cols, 1),
        pixels,
        labels.into_iter().map(usize::from).collect(),
        DIGIT_CLASSES,
    )
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = idx::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Bilinear resize with corner-aligned sampling, f32 arithmetic and
/// round-half-up back to u8. Grey images are replicated to three channels.
pub fn preprocess(dataset: &ImageDataset, size: usize) -> Result<ImageDataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    if dataset.channels != 1 && dataset.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected 1 or 3 channels, got {}",
            dataset.channels
        )));
    }
    let (h, w, c) = (dataset.height, dataset.width, dataset.channels);
    let ys = sample_grid(h, size);
    let xs = sample_grid(w, size);
    let mut out = Vec::with_capacity(dataset.len() * size * size * 3);
    for i in 0..dataset.len() {
        let img = dataset.image(i);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let mut px = [0u8; 3];
                for (ch, p) in px.iter_mut().enumerate().take(c) {
                    let at = |y: usize, x: usize| img[(y * w + x) * c + ch] as f32;
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    *p = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
                }
                if c == 1 {
                    px = [px[0]; 3];
                }
                out.extend_from_slice(&px);
            }
        }
    }
    ImageDataset::new(
        dataset.name.clone(),
        (size, size, 3),
        out,
        dataset.labels.clone(),
        dataset.classes,
    )
}

/// Source rows (or columns) and weight for each output coordinate.
fn sample_grid(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|i| {
            let src = if output == 1 {
                0.0
            } else {
                (i * (input - 1)) as f32 / (output - 1) as f32
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f32)
        })
        .collect()
}

/// The first `n` samples in file order.
pub fn take_first_n(dataset: &ImageDataset, n: usize) -> Result<ImageDataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "asked for {n} samples, {} has only {}",
            dataset.name,
            dataset.len()
        )));
    }
    ImageDataset::new(
        dataset.name.clone(),
        (dataset.height, dataset.width, dataset.channels),
        dataset.pixels[..n * dataset.image_len()].to_vec(),
        dataset.labels[..n].to_vec(),
        dataset.classes,
    )
}

/// Pixel-wise `255 - p`, the u8 form of `v -> 1 - v`.
pub fn reverse_dataset(dataset: &ImageDataset) -> ImageDataset {
    ImageDataset {
        name: format!("{}-reversed", dataset.name),
        pixels: dataset.pixels.iter().map(|&p| 255 - p).collect(),
        ..dataset.clone()
    }
}

/// Normalized channel-first images with their u8 source and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(batch, channels, height, width)`, values `p / 255`.
    pub images: Tensor<f32>,
    /// The same images as u8, channel-first.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn from_chw(pixels: Vec<u8>, shape: Vec<usize>, labels: Vec<usize>, indices: Vec<usize>) -> Self {
        let table = unit_table();
        let values = pixels.iter().map(|&p| table[p as usize]).collect();
        Self {
            images: Tensor::new(shape, values).expect("batch layout"),
            pixels,
            labels,
            indices,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.images.cast()
    }
}

fn unit_table() -> [f32; 256] {
    let mut t = [0.0f32; 256];
    for (p, v) in t.iter_mut().enumerate() {
        *v = p as f32 / 255.0;
    }
    t
}

/// `v -> 1 - v` on every pixel, computed on the u8 source.
pub fn intensity_reverse(batch: &Batch) -> Batch {
    Batch::from_chw(
        batch.pixels.iter().map(|&p| 255 - p).collect(),
        batch.images.shape().to_vec(),
        batch.labels.clone(),
        batch.indices.clone(),
    )
}

/// Gathers the samples at `indices` into one batch.
pub fn make_batch(dataset: &ImageDataset, indices: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w, c) = (dataset.height, dataset.width, dataset.channels);
    let mut pixels = Vec::with_capacity(indices.len() * h * w * c);
    for &i in indices {
        if i >= dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "sample {i} outside dataset of {}",
                dataset.len()
            )));
        }
        let img = dataset.image(i);
        for ch in 0..c {
            pixels.extend((0..h * w).map(|p| img[p * c + ch]));
        }
    }
    Ok(Batch::from_chw(
        pixels,
        vec![indices.len(), c, h, w],
        indices.iter().map(|&i| dataset.labels[i]).collect(),
        indices.to_vec(),
    ))
}

/// Epoch order of `n` samples, a pure function of `(seed, epoch)`.
pub fn permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Splits `order` into chunks of `batch_size`, keeping the final partial chunk.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffled minibatches for one epoch.
pub fn batches(dataset: &ImageDataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = permutation(dataset.len(), seed, epoch);
    batch_indices(&order, batch_size)?
        .iter()
        .map(|idx| make_batch(dataset, idx))
        .collect()
}

/// Dataset batches in file order, for evaluation.
pub fn sequential_batches(dataset: &ImageDataset, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    let order: Vec<usize> = (0..dataset.len()).collect();
    batch_indices(&order, batch_size)
}
