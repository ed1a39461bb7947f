//! IDX files (the MNIST family): big-endian magic `0x00000803` for `u8`
//! image tensors and `0x00000801` for `u8` label vectors, followed by
//! big-endian `u32` dimension sizes and the raw bytes.

use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, FormatError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(FormatError::Truncated {
            needed: (at + 4) as u64,
            available: bytes.len() as u64,
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), FormatError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> std::result::Result<IdxImages, FormatError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            needed: need as u64,
            available: bytes.len() as u64,
        });
    }
    if bytes.len() > need {
        return Err(FormatError::Header(format!("{} trailing bytes after image data", bytes.len() - need)));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..need].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, FormatError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            needed: need as u64,
            available: bytes.len() as u64,
        });
    }
    if bytes.len() > need {
        return Err(FormatError::Header(format!("{} trailing bytes after labels", bytes.len() - need)));
    }
    Ok(bytes[8..need].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_images(&bytes)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_labels(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_big_endian() {
        let img = IdxImages {
            count: 2,
            rows: 1,
            cols: 3,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        let bytes = encode_images(&img);
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
        assert_eq!(parse_images(&bytes).unwrap(), img);
        let lbl = encode_labels(&[7, 1]);
        assert_eq!(lbl, vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 1]);
        assert_eq!(parse_labels(&lbl).unwrap(), vec![7, 1]);
    }

    #[test]
    fn wrong_magic() {
        let lbl = encode_labels(&[1]);
        assert!(matches!(parse_images(&lbl), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn truncated() {
        let img = IdxImages {
            count: 3,
            rows: 2,
            cols: 2,
            pixels: vec![9; 12],
        };
        let bytes = encode_images(&img);
        assert!(matches!(parse_images(&bytes[..20]), Err(FormatError::Truncated { .. })));
        assert!(matches!(parse_images(&bytes[..6]), Err(FormatError::Truncated { .. })));
    }
}
