//! IDX files (the MNIST container format).
//!
//! Layout, all integers big-endian: two zero bytes, a type code (`0x08` for
//! unsigned bytes, the only one supported here), the number of dimensions,
//! one `u32` size per dimension, then the raw data.

use std::path::Path;

use super::{DataError, Dataset, Result};
use crate::linalg::Matrix;

const TYPE_U8: u8 = 0x08;
const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn magic(&self) -> u32 {
        ((TYPE_U8 as u32) << 8) | self.dims.len() as u32
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { needed: 4, found: bytes.len() });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::BadMagic(magic));
    }
    if bytes[2] != TYPE_U8 {
        return Err(DataError::UnsupportedType(bytes[2]));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated { needed: header, found: bytes.len() });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let needed = header + count;
    if bytes.len() < needed {
        return Err(DataError::Truncated { needed, found: bytes.len() });
    }
    Ok(IdxTensor { dims, data: bytes[header..needed].to_vec() })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxTensor> {
    parse_idx(&std::fs::read(path)?)
}

pub fn encode_idx(t: &IdxTensor) -> Vec<u8> {
    let mut out = vec![0, 0, TYPE_U8, t.dims.len() as u8];
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

pub fn write_idx(path: impl AsRef<Path>, t: &IdxTensor) -> Result<()> {
    std::fs::write(path, encode_idx(t))?;
    Ok(())
}

/// Images as a `(rows·cols) × n` matrix with pixels scaled to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    let t = read_idx(path)?;
    if t.magic() != MAGIC_IMAGES {
        return Err(DataError::BadMagic(t.magic()));
    }
    let n = t.dims[0];
    let pixels = t.dims[1] * t.dims[2];
    let mut m = Matrix::zeros(pixels, n);
    for (i, img) in t.data.chunks_exact(pixels.max(1)).enumerate().take(n) {
        for (p, &v) in img.iter().enumerate() {
            m[(p, i)] = v as f64 / 255.0;
        }
    }
    Ok(m)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let t = read_idx(path)?;
    if t.magic() != MAGIC_LABELS {
        return Err(DataError::BadMagic(t.magic()));
    }
    Ok(t.data.iter().map(|&v| v as usize).collect())
}

/// Pairs an image file with a label file, keeping at most `limit` examples.
pub fn mnist_dataset(images: impl AsRef<Path>, labels: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if x.cols() != y.len() {
        return Err(DataError::InvalidParameters(format!("{} images but {} labels", x.cols(), y.len())));
    }
    let classes = y.iter().max().map_or(1, |m| m + 1).max(10);
    let ds = Dataset::new(x, y, classes)?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_tiny_images() {
        // Magic 0x00000803, three dims (2, 1, 1), pixels 0 and 255.
        let bytes = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 255];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx3");
        std::fs::write(&path, bytes).unwrap();
        let m = load_idx_images(&path).unwrap();
        assert_eq!(m, Matrix::from_rows(&[[0.0, 1.0]]));
    }

    #[test]
    fn three_labels() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 2];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lbl.idx1");
        std::fs::write(&path, bytes).unwrap();
        assert_eq!(load_idx_labels(&path).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn truncated_header() {
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(DataError::Truncated { .. })));
        assert!(matches!(parse_idx(&[0, 0, 8, 2, 0, 0, 0]), Err(DataError::Truncated { .. })));
        assert!(matches!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 1, 2]), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_and_type() {
        assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]), Err(DataError::BadMagic(_))));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]), Err(DataError::UnsupportedType(0x0d))));
    }

    #[test]
    fn labels_file_is_not_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lbl.idx1");
        write_idx(&path, &IdxTensor { dims: vec![2], data: vec![1, 2] }).unwrap();
        assert!(matches!(load_idx_images(&path), Err(DataError::BadMagic(0x801))));
    }

    #[test]
    fn mnist_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i");
        let lbl = dir.path().join("l");
        write_idx(&img, &IdxTensor { dims: vec![3, 2, 2], data: (0..12).collect() }).unwrap();
        write_idx(&lbl, &IdxTensor { dims: vec![3], data: vec![7, 1, 9] }).unwrap();
        let ds = mnist_dataset(&img, &lbl, Some(2)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels, vec![7, 1]);
        assert_eq!(ds.classes, 10);
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u8>()) {
            let count: usize = dims.iter().product();
            let data: Vec<u8> = (0..count).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let t = IdxTensor { dims, data };
            prop_assert_eq!(parse_idx(&encode_idx(&t)).unwrap(), t);
        }
    }
}
