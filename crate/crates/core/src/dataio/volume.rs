//! `VVOL` single-channel volume files.
//!
//! ```text
//! offset  size  field
//!  0      4     magic "VVOL"
//!  4      4     u32 format version (1)
//!  8      4     u32 dtype tag (0 = f32)
//! 12      12    u32 extents d, h, w
//! 24      4·d·h·w  f32 voxels, z-major then y then x
//! ```
//!
//! All integers and scalars are little-endian. Bytes after the payload are
//! never read.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::volgrad::Tensor;
use crate::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"VVOL";
pub const VOLUME_VERSION: u32 = 1;
pub const VOLUME_HEADER_LEN: usize = 24;
const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VolumeError {
    #[error("bad magic {found:?} at byte 0, expected \"VVOL\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {version} at byte 4")]
    UnsupportedVersion { version: u32 },
    #[error("unsupported dtype tag {tag} at byte 8")]
    UnsupportedDtype { tag: u32 },
    #[error("invalid extents {extents:?} at byte 12")]
    BadExtents { extents: [u32; 3] },
    #[error("truncated at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated { offset: u64, expected: u64, found: u64 },
    #[error("non-finite voxel {index} at byte {offset}")]
    NonFinite { index: usize, offset: u64 },
    #[error("cannot encode: {0}")]
    Unencodable(String),
    #[error("read failed at byte {offset}: {message}")]
    Io { offset: u64, message: String },
}

/// Byte offset of voxel `(z, y, x)` in a file with extents `(_, h, w)`.
pub fn voxel_offset(extents: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    VOLUME_HEADER_LEN + 4 * ((z * extents[1] + y) * extents[2] + x)
}

struct Header {
    extents: [usize; 3],
    payload_len: u64,
}

fn parse_header(h: &[u8]) -> std::result::Result<Header, VolumeError> {
    let seen = h.len().min(4);
    if h[..seen] != VOLUME_MAGIC[..seen] {
        return Err(VolumeError::BadMagic {
            found: h[..h.len().min(4)].to_vec(),
        });
    }
    if h.len() < VOLUME_HEADER_LEN {
        return Err(VolumeError::Truncated {
            offset: h.len() as u64,
            expected: VOLUME_HEADER_LEN as u64,
            found: h.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VOLUME_VERSION {
        return Err(VolumeError::UnsupportedVersion { version });
    }
    let tag = u32_at(8);
    if tag != DTYPE_F32 {
        return Err(VolumeError::UnsupportedDtype { tag });
    }
    let raw = [u32_at(12), u32_at(16), u32_at(20)];
    if raw.contains(&0) {
        return Err(VolumeError::BadExtents { extents: raw });
    }
    let payload_len = raw
        .iter()
        .try_fold(4u64, |a, &d| a.checked_mul(u64::from(d)))
        .ok_or(VolumeError::BadExtents { extents: raw })?;
    Ok(Header {
        extents: raw.map(|d| d as usize),
        payload_len,
    })
}

fn decode_payload(extents: [usize; 3], payload: &[u8]) -> std::result::Result<Tensor<f32>, VolumeError> {
    let mut data = Vec::with_capacity(payload.len() / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(VolumeError::NonFinite {
                index: i,
                offset: (VOLUME_HEADER_LEN + 4 * i) as u64,
            });
        }
        data.push(v);
    }
    Ok(Tensor::new(&extents, data).expect("payload length matches extents"))
}

/// Parses a complete in-memory volume file.
pub fn decode_volume(bytes: &[u8]) -> std::result::Result<Tensor<f32>, VolumeError> {
    let header = parse_header(&bytes[..bytes.len().min(VOLUME_HEADER_LEN)])?;
    let available = (bytes.len() - VOLUME_HEADER_LEN) as u64;
    if available < header.payload_len {
        return Err(VolumeError::Truncated {
            offset: bytes.len() as u64,
            expected: VOLUME_HEADER_LEN as u64 + header.payload_len,
            found: bytes.len() as u64,
        });
    }
    let end = VOLUME_HEADER_LEN + header.payload_len as usize;
    decode_payload(header.extents, &bytes[VOLUME_HEADER_LEN..end])
}

pub fn encode_volume(volume: &Tensor<f32>) -> std::result::Result<Vec<u8>, VolumeError> {
    if volume.rank() != 3 {
        return Err(VolumeError::Unencodable(format!(
            "volumes are [D, H, W], got shape {:?}",
            volume.shape()
        )));
    }
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + 4 * volume.numel());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &d in volume.shape() {
        let d = u32::try_from(d).map_err(|_| VolumeError::Unencodable(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, v) in volume.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(VolumeError::NonFinite {
                index: i,
                offset: (VOLUME_HEADER_LEN + 4 * i) as u64,
            });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn wrap(path: &Path) -> impl Fn(VolumeError) -> Error + '_ {
    move |source| Error::Volume {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a volume file: the header is validated before any payload byte is
/// read, and exactly the declared payload is consumed.
pub fn load_volume(path: &Path) -> Result<Tensor<f32>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::with_capacity(VOLUME_HEADER_LEN);
    (&mut file)
        .take(VOLUME_HEADER_LEN as u64)
        .read_to_end(&mut header)
        .map_err(|e| {
            wrap(path)(VolumeError::Io {
                offset: 0,
                message: e.to_string(),
            })
        })?;
    let h = parse_header(&header).map_err(wrap(path))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let available = file_len.saturating_sub(VOLUME_HEADER_LEN as u64);
    if available < h.payload_len {
        return Err(wrap(path)(VolumeError::Truncated {
            offset: file_len,
            expected: VOLUME_HEADER_LEN as u64 + h.payload_len,
            found: file_len,
        }));
    }
    let mut payload = vec![0u8; h.payload_len as usize];
    file.read_exact(&mut payload).map_err(|e| {
        wrap(path)(VolumeError::Io {
            offset: VOLUME_HEADER_LEN as u64,
            message: e.to_string(),
        })
    })?;
    decode_payload(h.extents, &payload).map_err(wrap(path))
}

pub fn save_volume(volume: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_volume(volume).map_err(wrap(path))?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_values_for_eight_voxels_is_truncated() {
        let mut bytes = encode_volume(&Tensor::zeros(&[2, 2, 2])).unwrap();
        bytes.truncate(VOLUME_HEADER_LEN + 7 * 4);
        assert!(matches!(decode_volume(&bytes), Err(VolumeError::Truncated { .. })));
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = encode_volume(&Tensor::zeros(&[1, 2, 3])).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_volume(&b), Err(VolumeError::BadMagic { .. })));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(
            decode_volume(&b),
            Err(VolumeError::UnsupportedVersion { version: 9 })
        ));
        let mut b = good.clone();
        b[8] = 1;
        assert!(matches!(
            decode_volume(&b),
            Err(VolumeError::UnsupportedDtype { tag: 1 })
        ));
        let mut b = good.clone();
        b[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_volume(&b), Err(VolumeError::BadExtents { .. })));
        let mut b = good;
        let at = VOLUME_HEADER_LEN + 4 * 5;
        b[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_volume(&b),
            Err(VolumeError::NonFinite { index: 5, .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_ignored() {
        let v = Tensor::from_fn(&[2, 1, 3], |i| i as f32);
        let mut b = encode_volume(&v).unwrap();
        b.extend_from_slice(&[0xff; 9]);
        assert_eq!(decode_volume(&b).unwrap(), v);
    }
}
