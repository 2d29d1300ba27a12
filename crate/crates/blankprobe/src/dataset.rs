//! MNIST / FashionMNIST ingestion in IDX binary format.
//!
//! Files may be raw IDX or gzip-compressed (sniffed by the 0x1f8b magic).
//! Nothing here downloads anything; callers hand over file paths.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw images as parsed from an IDX file, before normalization.
#[derive(Debug)]
pub struct RawImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// An immutable dataset of [0,1]-normalized images with class labels.
#[derive(Debug)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<u8>,
    class_count: usize,
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset,
            message: format!("truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image payload (big-endian magic 0x00000803).
pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    let magic = read_be_u32(bytes, 0, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected image magic 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::Format {
            offset: 16,
            message: format!(
                "image payload holds {} bytes, header promises {expected}",
                payload.len()
            ),
        });
    }
    Ok(RawImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

/// Parse an IDX label payload (big-endian magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected label magic 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Format {
            offset: 8,
            message: format!("label payload holds {} bytes, header promises {count}", payload.len()),
        });
    }
    Ok(payload.to_vec())
}

/// Byte-to-unit-interval normalization: `v / 255`.
pub fn normalize(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&v| v as f32 / 255.0).collect()
}

/// Read a file, transparently gunzipping when it starts with 0x1f8b.
pub fn read_idx_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

impl LabeledImageSet {
    /// Assemble a dataset from parsed parts, validating the label range.
    pub fn from_parts(raw: RawImages, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        if raw.count != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                raw.count,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        let images = Tensor::new(
            vec![raw.count, 1, raw.rows, raw.cols],
            normalize(&raw.pixels),
        )?;
        Ok(LabeledImageSet {
            images,
            labels,
            class_count,
        })
    }

    /// Load an images/labels file pair (raw or gzipped IDX).
    pub fn load(images_path: &Path, labels_path: &Path, class_count: usize) -> Result<Self> {
        let raw = parse_idx_images(&read_idx_file(images_path)?)?;
        let labels = parse_idx_labels(&read_idx_file(labels_path)?)?;
        Self::from_parts(raw, labels, class_count)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    pub fn image_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Copy of sample `index` as a [C,H,W] tensor.
    pub fn image(&self, index: usize) -> Tensor {
        let shape = self.image_shape();
        let size: usize = shape.iter().product();
        let data = self.images.data()[index * size..][..size].to_vec();
        Tensor::from_parts(shape, data)
    }

    /// Keep only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n == 0 || n >= self.len() {
            return;
        }
        let mut shape = self.images.shape().to_vec();
        let size: usize = shape[1..].iter().product();
        shape[0] = n;
        self.images = Tensor::from_parts(shape, self.images.data()[..n * size].to_vec());
        self.labels.truncate(n);
    }

    /// Deterministic shuffled batch iterator over one epoch.
    pub fn batches(&self, batch: usize, seed: u64) -> Result<BatchIter<'_>> {
        if batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if batch > self.len() {
            return Err(Error::Config(format!(
                "batch size {batch} exceeds dataset size {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        Ok(BatchIter {
            set: self,
            order,
            cursor: 0,
            batch,
        })
    }
}

/// Single-consumer iterator over index batches; each epoch pass covers
/// every sample exactly once.
pub struct BatchIter<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(out)
    }
}

impl<'a> BatchIter<'a> {
    pub fn dataset(&self) -> &'a LabeledImageSet {
        self.set
    }
}
