use std::path::Path;

use super::{Dataset, Split};
use crate::error::{NpnError, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn parse_error(path: &Path, offset: usize, message: impl Into<String>) -> NpnError {
    NpnError::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_error(path, bytes.len(), "file truncated inside the header"))
}

/// IDX image file to `[n, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(parse_error(
            path,
            0,
            format!("image magic {magic}, expected {IMAGE_MAGIC}"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(parse_error(path, 4, "zero extent in image header"));
    }
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(parse_error(
            path,
            bytes.len(),
            format!("expected {need} pixel bytes after the header, found {}", body.len()),
        ));
    }
    let data = body[..need].iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

/// IDX label file to a label vector.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(parse_error(
            path,
            0,
            format!("label magic {magic}, expected {LABEL_MAGIC}"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(parse_error(
            path,
            bytes.len(),
            format!("expected {n} labels after the header, found {}", body.len()),
        ));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an (uncompressed) IDX image/label pair as a 10-class dataset.
pub fn mnist_load(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| NpnError::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| NpnError::io(labels_path, e))?;
    let x = parse_idx_images(&images, images_path)?;
    let y = parse_idx_labels(&labels, labels_path)?;
    if x.shape()[0] != y.len() {
        return Err(parse_error(
            labels_path,
            4,
            format!("{} labels for {} images", y.len(), x.shape()[0]),
        ));
    }
    if let Some(pos) = y.iter().position(|&v| v > 9) {
        return Err(parse_error(labels_path, 8 + pos, format!("label {} out of range", y[pos])));
    }
    Dataset::new(x, y, Split::Full, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_tiny_image_file() {
        let mut bytes = header(2051, &[2, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let t = parse_idx_images(&bytes, Path::new("x")).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut bytes = header(2051, &[3]);
        bytes.extend_from_slice(&[1, 2, 3]);
        match parse_idx_labels(&bytes, Path::new("y")) {
            Err(NpnError::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let mut bytes = header(2049, &[5]);
        bytes.extend_from_slice(&[1, 2, 3]);
        match parse_idx_labels(&bytes, Path::new("y")) {
            Err(NpnError::Parse { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("{other:?}"),
        }
        assert!(parse_idx_images(&[0, 0, 8], Path::new("x")).is_err());
    }
}
