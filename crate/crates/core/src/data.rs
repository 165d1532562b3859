//! Image batches and MNIST ingestion from IDX files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A set of images in NHWC layout with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    height: usize,
    width: usize,
    channels: usize,
    classes: usize,
}

impl ImageBatch {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        (height, width, channels): (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let dim = height * width * channels;
        if dim == 0 {
            return Err(Error::InvalidBatch("zero-sized image".into()));
        }
        if pixels.len() != labels.len() * dim {
            return Err(Error::InvalidBatch(format!(
                "{} pixels for {} images of {dim} values",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidBatch(format!("pixel {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidBatch(format!(
                "label {l} >= {classes} classes"
            )));
        }
        Ok(Self {
            pixels,
            labels,
            height,
            width,
            channels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the listed items, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let d = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageBatch {
            pixels,
            labels,
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
        }
    }

    /// First `n` items (or all, if fewer).
    pub fn head(&self, n: usize) -> ImageBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `n` items drawn uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ImageBatch {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        self.select(&idx)
    }
}

/// Loads the four standard MNIST IDX files from `dir`.
///
/// Returns `(train, test)` with pixels scaled to `[0, 1]` and `K = 10`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(ImageBatch, ImageBatch)> {
    let dir = dir.as_ref();
    let train = load_split(dir, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS)?;
    let test = load_split(dir, MNIST_TEST_IMAGES, MNIST_TEST_LABELS)?;
    Ok((train, test))
}

fn load_split(dir: &Path, images: &str, labels: &str) -> Result<ImageBatch> {
    let img_path = dir.join(images);
    let lbl_path = dir.join(labels);
    let (pixels, count, rows, cols) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(&lbl_path)?;
    if labels.len() != count {
        return Err(Error::Ingestion {
            file: lbl_path,
            reason: format!("{} labels for {count} images", labels.len()),
        });
    }
    ImageBatch::new(pixels, labels, (rows, cols, 1), 10)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    let b = bytes.get(offset..offset + 4)?;
    Some(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX3 image file into normalized pixels. Returns
/// `(pixels, count, rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<f32>, usize, usize, usize)> {
    let bytes = read_file(path)?;
    let bad = |reason: String| Error::Ingestion {
        file: path.to_path_buf(),
        reason,
    };
    let magic = be_u32(&bytes, 0).ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(bad(format!("bad magic number {magic:#010x}")));
    }
    let header = |i: usize| be_u32(&bytes, 4 * i).ok_or_else(|| bad("truncated header".into()));
    let count = header(1)? as usize;
    let rows = header(2)? as usize;
    let cols = header(3)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(bad(format!(
            "expected {} pixel bytes, found {}",
            count * rows * cols,
            body.len()
        )));
    }
    let pixels = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((pixels, count, rows, cols))
}

/// Parses an IDX1 label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let bad = |reason: String| Error::Ingestion {
        file: path.to_path_buf(),
        reason,
    };
    let magic = be_u32(&bytes, 0).ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(bad(format!("bad magic number {magic:#010x}")));
    }
    let count = be_u32(&bytes, 4).ok_or_else(|| bad("truncated header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(bad(format!(
            "expected {count} labels, found {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}
