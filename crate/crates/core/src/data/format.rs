//! Binary slice container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `CEVS`                        |
//! | 4      | 1    | version (1)                         |
//! | 5      | 1    | dtype: 1 = float32 LE, 2 = u8       |
//! | 6      | 2    | reserved, zero                      |
//! | 8      | 4    | height                              |
//! | 12     | 4    | width                               |
//! | 16     | ...  | row-major pixels                    |

use std::fs;
use std::path::Path;

use super::grid::{Image, Mask};
use crate::error::{CevaeError, Result};

pub const MAGIC: &[u8; 4] = b"CEVS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

fn header(dtype: DType, height: usize, width: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4] = VERSION;
    h[5] = dtype as u8;
    h[8..12].copy_from_slice(&(height as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(width as u32).to_le_bytes());
    h
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + image.len() * 4);
    buf.extend_from_slice(&header(DType::F32, image.height(), image.width()));
    for v in image.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + mask.len());
    buf.extend_from_slice(&header(DType::U8, mask.height(), mask.width()));
    buf.extend_from_slice(mask.as_slice());
    buf
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(DType, usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(CevaeError::format(path, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CevaeError::format(path, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(CevaeError::format(
            path,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| CevaeError::format(path, format!("unknown dtype code {}", bytes[5])))?;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + height * width * dtype.size();
    if bytes.len() != expected {
        return Err(CevaeError::format(
            path,
            format!(
                "payload length {} does not match {height}x{width} pixels",
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    Ok((dtype, height, width))
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let (dtype, h, w) = parse_header(bytes, path)?;
    let payload = &bytes[HEADER_LEN..];
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::U8 => payload.iter().map(|&v| v as f32).collect(),
    };
    Image::from_vec(h, w, data)
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let (dtype, h, w) = parse_header(bytes, path)?;
    if dtype != DType::U8 {
        return Err(CevaeError::format(path, "mask must use dtype u8"));
    }
    let data = bytes[HEADER_LEN..].to_vec();
    if data.iter().any(|&v| v > 1) {
        return Err(CevaeError::format(path, "mask values must be 0 or 1"));
    }
    Mask::from_vec(h, w, data)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CevaeError::MissingFile(path.to_path_buf())
        } else {
            CevaeError::io(path, e)
        }
    })
}

pub fn read_slice(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_image(&read_bytes(path)?, path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_mask(&read_bytes(path)?, path)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CevaeError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CevaeError::io(path, e))
}

pub fn write_slice(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    write_bytes(path.as_ref(), &encode_image(image))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = Image::from_vec(2, 3, vec![0.0; 6]).unwrap();
        let bytes = encode_image(&img);
        assert_eq!(&bytes[..4], b"CEVS");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let img = Image::filled(4, 4, 1.5);
        let mut bytes = encode_image(&img);
        bytes.truncate(bytes.len() - 3);
        let err = decode_image(&bytes, Path::new("t.cevs")).unwrap_err();
        assert!(matches!(err, CevaeError::Format { .. }), "{err}");
        let err = decode_image(&bytes[..10], Path::new("t.cevs")).unwrap_err();
        assert!(err.to_string().contains("t.cevs"));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_image(&Image::filled(2, 2, 0.0));
        bytes[0] = b'X';
        assert!(decode_image(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn mask_round_trip_and_value_check() {
        let mask = Mask::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        let bytes = encode_mask(&mask);
        assert_eq!(decode_mask(&bytes, Path::new("m")).unwrap(), mask);
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 7;
        assert!(decode_mask(&bad, Path::new("m")).is_err());
        // float files are not masks
        assert!(decode_mask(&encode_image(&Image::filled(2, 2, 0.0)), Path::new("m")).is_err());
    }

    #[test]
    fn file_round_trip_64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.cevs");
        let img = Image::from_fn(64, 64, |r, c| ((r * 64 + c) as f32).sin() * 1e3);
        write_slice(&path, &img).unwrap();
        let back = read_slice(&path).unwrap();
        assert_eq!(
            img.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let missing = read_slice(dir.path().join("nope.cevs")).unwrap_err();
        assert!(matches!(missing, CevaeError::MissingFile(_)));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut s = seed;
            let img = Image::from_fn(h, w, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((s >> 32) as u32 & 0x7f7f_ffff)
            });
            let back = decode_image(&encode_image(&img), Path::new("p")).unwrap();
            let a: Vec<u32> = img.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
