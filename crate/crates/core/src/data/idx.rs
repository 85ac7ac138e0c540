//! IDX files: big-endian magic `0x0000 TT DD` (TT = element type, DD =
//! number of dimensions), DD big-endian u32 extents, then raw elements.
//! Only unsigned-byte image cubes and label vectors are supported.

use std::path::Path;

use crate::nn::Tensor;

use super::DataError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as `[n, rows, cols, 1]` scaled to `[0, 1]`, plus labels when given.
#[derive(Debug, Clone)]
pub struct IdxBatch {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &[u8]), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::IdxLength {
            expected: 4,
            found: bytes.len(),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(DataError::IdxFormat {
            expected: magic,
            found,
        });
    }
    let head = 4 + 4 * dims;
    if bytes.len() < head {
        return Err(DataError::IdxLength {
            expected: head,
            found: bytes.len(),
        });
    }
    let extents: Vec<usize> = bytes[4..head]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let body = &bytes[head..];
    let expected: usize = extents.iter().product();
    if body.len() != expected {
        return Err(DataError::IdxLength {
            expected: head + expected,
            found: bytes.len(),
        });
    }
    Ok((extents, body))
}

pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (ext, body) = header(bytes, IMAGES_MAGIC, 3)?;
    if ext.contains(&0) {
        return Err(DataError::Invalid(format!("empty image cube {ext:?}")));
    }
    let data = body.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![ext[0], ext[1], ext[2], 1], data)?)
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let (_, body) = header(bytes, LABELS_MAGIC, 1)?;
    Ok(body.to_vec())
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols, "pixel count");
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<IdxBatch, DataError> {
    let images = decode_idx_images(&read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = decode_idx_labels(&read(p)?)?;
            if l.len() != images.batch_len() {
                return Err(DataError::Invalid(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.batch_len()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok(IdxBatch { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_images_read_back_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx3");
        std::fs::write(&path, encode_idx_images(4, 28, 28, &vec![0u8; 4 * 28 * 28])).unwrap();
        let batch = load_idx(&path, None).unwrap();
        assert_eq!(batch.images.shape(), &[4, 28, 28, 1]);
        assert!(batch.images.data().iter().all(|&v| v == 0.0));
        assert!(batch.labels.is_none());
    }

    #[test]
    fn pixels_scale_to_unit_range() {
        let t = decode_idx_images(&encode_idx_images(1, 1, 3, &[0, 51, 255])).unwrap();
        assert_eq!(t.data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn short_payload_is_a_length_error() {
        let mut bytes = encode_idx_images(9, 2, 2, &[7u8; 36]);
        bytes[4..8].copy_from_slice(&10u32.to_be_bytes());
        assert!(matches!(
            decode_idx_images(&bytes),
            Err(DataError::IdxLength { .. })
        ));
    }

    #[test]
    fn label_bytes_decode_verbatim() {
        assert_eq!(
            decode_idx_labels(&encode_idx_labels(&[0, 1, 2])).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let bytes = encode_idx_labels(&[1, 2]);
        assert!(matches!(
            decode_idx_images(&bytes),
            Err(DataError::IdxFormat { found: 0x801, .. })
        ));
    }
}
