//! IDX reader for MNIST-format image and label files, with transparent gzip.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as raw `u8` pixels, converted to `[0,1]` features on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct MnistData {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl MnistData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Pixels of image `i` scaled by `1/255`.
    pub fn features(&self, i: usize) -> Vec<f64> {
        let d = self.dim();
        self.pixels[i * d..(i + 1) * d]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect()
    }

    /// `[indices.len() × dim]` feature matrix and matching labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(
                self.pixels[i * d..(i + 1) * d]
                    .iter()
                    .map(|&p| p as f64 / 255.0),
            );
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        (
            Tensor::new(vec![indices.len(), d], data).expect("batch size"),
            labels,
        )
    }

    /// The first `n` examples (all of them when `n` is larger).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Reads a file, gunzipping when it carries the gzip magic. A missing `path`
/// falls back to `path.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let actual = if path.exists() {
        path.to_path_buf()
    } else {
        let mut gz = path.as_os_str().to_owned();
        gz.push(".gz");
        let gz = PathBuf::from(gz);
        if gz.exists() {
            gz
        } else {
            path.to_path_buf()
        }
    };
    let raw = fs::read(&actual)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, ParseError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(ParseError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_images(
    bytes: &[u8],
) -> std::result::Result<(usize, usize, usize, Vec<u8>), ParseError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(ParseError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(ParseError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, ParseError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(ParseError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(ParseError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(ParseError::BadLabel(bad));
    }
    Ok(labels)
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<MnistData> {
    let at = |path: &Path| {
        let path = path.to_path_buf();
        move |kind| Error::Parse { path, kind }
    };
    let (n, rows, cols, pixels) =
        parse_images(&read_maybe_gz(images_path)?).map_err(at(images_path))?;
    let labels = parse_labels(&read_maybe_gz(labels_path)?).map_err(at(labels_path))?;
    if labels.len() != n {
        return Err(at(labels_path)(ParseError::CountMismatch {
            images: n,
            labels: labels.len(),
        }));
    }
    Ok(MnistData {
        pixels,
        labels,
        rows,
        cols,
    })
}

/// Loads `train-*` or `t10k-*` files from a directory in the canonical
/// naming, gzipped or not.
pub fn load_mnist_split(dir: &Path, train: bool) -> Result<MnistData> {
    let prefix = if train { "train" } else { "t10k" };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}
