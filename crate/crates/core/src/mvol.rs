//! MVOL container.
//!
//! ```text
//! offset size field
//!      0    4 magic "MVOL"
//!      4    2 version (u16, = 1)
//!      6   12 nx, ny, nz (u32 each)
//!     18   12 sx, sy, sz (f32 each, mm)
//!     30    1 dtype (0 = i16 HU, 1 = u8 labels)
//!     31    . payload, x-fastest
//! ```
//! All multi-byte fields are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SegError};
use crate::volume::{LabelVolume, Volume};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Hu = 0,
    Label = 1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: DType,
}

/// Either payload kind, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum MvolData {
    Hu(Volume),
    Labels(LabelVolume),
}

fn encode_header(h: &Header) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &d in &h.dims {
        let d = u32::try_from(d).map_err(|_| SegError::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &s in &h.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(h.dtype as u8);
    debug_assert_eq!(out.len(), HEADER_LEN);
    Ok(out)
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(SegError::Format("missing MVOL magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(SegError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(SegError::Format(format!("unsupported MVOL version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6), u32_at(10), u32_at(14)];
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    let dtype = match bytes[30] {
        0 => DType::Hu,
        1 => DType::Label,
        d => return Err(SegError::Format(format!("unknown dtype {d}"))),
    };
    Ok(Header { dims, spacing, dtype })
}

fn payload_len(h: &Header) -> Result<usize> {
    let n = h.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| SegError::Format(format!("dims overflow {:?}", h.dims)))?;
    Ok(match h.dtype {
        DType::Hu => n * 2,
        DType::Label => n,
    })
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    let mut out = encode_header(&Header { dims: v.dims(), spacing: v.spacing(), dtype: DType::Hu })?;
    out.reserve(v.voxels().len() * 2);
    for &hu in v.voxels() {
        out.extend_from_slice(&hu.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_labels(l: &LabelVolume) -> Result<Vec<u8>> {
    let mut out = encode_header(&Header { dims: l.dims(), spacing: l.spacing(), dtype: DType::Label })?;
    out.extend(l.labels().iter().map(|l| l.code()));
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<MvolData> {
    let h = decode_header(bytes)?;
    let expected = payload_len(&h)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(SegError::Truncated { expected, found: payload.len() });
    }
    match h.dtype {
        DType::Hu => {
            let voxels = payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            Ok(MvolData::Hu(Volume::new(h.dims, h.spacing, voxels).map_err(|e| SegError::Format(e.to_string()))?))
        }
        DType::Label => Ok(MvolData::Labels(LabelVolume::from_codes(h.dims, h.spacing, payload)?)),
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<MvolData> {
    decode(&fs::read(path)?)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read(path)? {
        MvolData::Hu(v) => Ok(v),
        MvolData::Labels(_) => Err(SegError::Format("expected HU volume, found label volume".into())),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read(path)? {
        MvolData::Labels(l) => Ok(l),
        MvolData::Hu(_) => Err(SegError::Format("expected label volume, found HU volume".into())),
    }
}

/// Writes via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| SegError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_volume(v)?)
}

pub fn save_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_labels(l)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Label;

    #[test]
    fn zero_voxel_file_is_33_bytes() {
        let v = Volume::filled([1, 1, 1], [1.0; 3], 0).unwrap();
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(bytes.len(), 33);
        assert_eq!(&bytes[..4], b"MVOL");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[30], 0);
    }

    #[test]
    fn small_roundtrip() {
        let v = Volume::filled([2, 2, 1], [0.5, 0.5, 2.0], 0).unwrap();
        match decode(&encode_volume(&v).unwrap()).unwrap() {
            MvolData::Hu(w) => {
                assert_eq!(w, v);
                assert_eq!(w.voxels(), &[0, 0, 0, 0]);
            }
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut b = encode_volume(&Volume::filled([1, 1, 1], [1.0; 3], 0).unwrap()).unwrap();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(SegError::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], 7).unwrap();
        let b = encode_volume(&v).unwrap();
        let cut = &b[..HEADER_LEN + 20];
        assert!(matches!(decode(cut), Err(SegError::Truncated { expected: 128, found: 20 })));
    }

    #[test]
    fn invalid_label_code_rejected() {
        let l = LabelVolume::filled([2, 1, 1], [1.0; 3], Label::Body).unwrap();
        let mut b = encode_labels(&l).unwrap();
        b[HEADER_LEN] = 9;
        assert!(decode(&b).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume::filled([1, 1, 1], [1.0; 3], 0).unwrap();
        let r = save_volume(&v, "/nonexistent-dir-for-test/x.mvol");
        assert!(matches!(r, Err(SegError::Io(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mvol");
        let v = Volume::new([3, 2, 2], [0.7, 0.7, 1.5], (0..12).map(|i| i * 100 - 1000).collect()).unwrap();
        save_volume(&v, &p).unwrap();
        assert_eq!(load_volume(&p).unwrap(), v);
        assert!(load_labels(&p).is_err());
    }
}
