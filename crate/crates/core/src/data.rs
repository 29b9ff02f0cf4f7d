//! MNIST in the IDX format (uncompressed, big-endian headers).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    /// `[N, 1, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.batch(), labels.len()),
            ));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Contiguous range `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        Self {
            name: self.name.clone(),
            images: self.images.slice_batch(start, end),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an IDX3 image file into `[N, 1, rows, cols]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(format_err(path, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let want = 16 + n * rows * cols;
    if bytes.len() < want {
        return Err(format_err(
            path,
            format!("truncated: {} bytes, header promises {want}", bytes.len()),
        ));
    }
    let data = bytes[16..want].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(format_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(format_err(path, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(
            path,
            format!("truncated: {} bytes, header promises {}", bytes.len(), 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

pub fn load_mnist_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let images = parse_idx_images(&read(ip)?, ip)?;
    let labels = parse_idx_labels(&read(lp)?, lp)?;
    if images.batch() != labels.len() {
        return Err(format_err(
            lp,
            format!("{} labels for {} images", labels.len(), images.batch()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(format_err(lp, format!("label {bad} outside 0..10")));
    }
    let name = ip
        .file_name()
        .map(|s| s.to_string_lossy().split('-').next().unwrap_or("mnist").to_string())
        .unwrap_or_else(|| "mnist".into());
    DatasetSplit::new(name, images, labels)
}

/// `train` or `test` split from a directory holding the four standard files.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: &str) -> Result<DatasetSplit> {
    let prefix = match split {
        "train" => "train",
        "test" | "t10k" => "t10k",
        other => return Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
    };
    let dir = dir.as_ref();
    let mut s = load_mnist_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    s.name = split.to_string();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_and_scales_pixels() {
        let p = Path::new("mem");
        let t = parse_idx_images(&idx_images(1, &[0, 255, 51, 255]), p).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 1.0]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let p = Path::new("mem");
        let mut bad = idx_images(1, &[0; 4]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, p), Err(Error::Format { .. })));
        assert!(parse_idx_images(&idx_images(2, &[0; 4]), p).is_err());
        let mut labels = LABEL_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2]);
        assert!(parse_idx_labels(&labels, p).is_err());
        assert!(parse_idx_labels(&idx_images(1, &[0; 4]), p).is_err());
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        fs::write(&ip, idx_images(1, &[0; 4])).unwrap();
        let mut labels = LABEL_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2]);
        fs::write(&lp, labels).unwrap();
        assert!(load_mnist_idx(&ip, &lp).is_err());
    }
}
