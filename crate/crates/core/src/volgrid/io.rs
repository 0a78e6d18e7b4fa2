//! VGF: `"VOLGRID1"`, u32 version, u8 dtype, u8 kind, u16 reserved, three
//! u32 dims, then the raw little-endian payload.

use super::{voxel_count, Dims, LabelMask, Volume, VolumeKind, Voxel};
use crate::error::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"VOLGRID1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 1 + 1 + 2 + 12;

/// A decoded volume whose element type is known only at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    F32(Volume<f32>),
    U8(LabelMask),
}

pub fn encode_volume<T: Voxel>(v: &Volume<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.len() * T::SIZE);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.push(v.kind().code());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in v.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in v.data() {
        x.put_le(&mut out);
    }
    out
}

struct Header {
    dtype: u8,
    kind: VolumeKind,
    dims: Dims,
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u32_at(8);
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    let dtype = bytes[12];
    if dtype > 1 {
        return Err(Error::Decode(format!("unknown dtype {dtype}")));
    }
    let kind = VolumeKind::from_code(bytes[13])
        .ok_or_else(|| Error::Decode(format!("unknown kind {}", bytes[13])))?;
    if u16::from_le_bytes([bytes[14], bytes[15]]) != 0 {
        return Err(Error::Decode("reserved field is nonzero".into()));
    }
    let dims = [u32_at(16) as usize, u32_at(20) as usize, u32_at(24) as usize];
    Ok(Header { dtype, kind, dims })
}

fn decode_payload<T: Voxel>(h: &Header, bytes: &[u8]) -> Result<Volume<T>> {
    if h.dtype != T::DTYPE {
        return Err(Error::Decode(format!("dtype {} where {} was expected", h.dtype, T::DTYPE)));
    }
    let n = voxel_count(h.dims).map_err(|e| Error::Decode(e.to_string()))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = n
        .checked_mul(T::SIZE)
        .ok_or_else(|| Error::Decode("payload size overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::Decode(format!(
            "dims {:?} need {expected} payload bytes, found {}",
            h.dims,
            payload.len()
        )));
    }
    let data: Vec<T> = payload.chunks_exact(T::SIZE).map(T::get_le).collect();
    Volume::from_raw(h.dims, h.kind, data).map_err(|e| Error::Decode(e.to_string()))
}

/// Decodes a VGF byte buffer of element type `T`.
///
/// Mask payloads must be binary. Score payloads are clamped into `[0, 1]`.
pub fn decode_volume<T: Voxel>(bytes: &[u8]) -> Result<Volume<T>> {
    T::from_any(decode_any(bytes)?).ok_or_else(|| Error::Decode(format!("dtype {} was expected", T::DTYPE)))
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyVolume> {
    let h = decode_header(bytes)?;
    let any = match h.dtype {
        0 => AnyVolume::F32(decode_payload(&h, bytes)?),
        _ => AnyVolume::U8(decode_payload(&h, bytes)?),
    };
    validated(any)
}

fn validated(any: AnyVolume) -> Result<AnyVolume> {
    match any {
        AnyVolume::U8(m) => {
            if m.data().iter().any(|&v| v > 1) {
                return Err(Error::Decode("mask payload is not binary".into()));
            }
            Ok(AnyVolume::U8(m))
        }
        AnyVolume::F32(v) if v.kind() == VolumeKind::Score => {
            let dims = v.dims();
            Ok(AnyVolume::F32(Volume::score_clamped(dims, v.into_data()).map_err(|e| Error::Decode(e.to_string()))?))
        }
        other => Ok(other),
    }
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyVolume> {
    decode_any(&fs::read(path)?)
}

pub fn read_volume<T: Voxel>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    T::from_any(read_any(path)?)
        .ok_or_else(|| Error::Decode(format!("{}: dtype {} was expected", path.display(), T::DTYPE)))
}

pub fn write_volume<T: Voxel>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar(path: impl AsRef<Path>, meta: &serde_json::Value) -> Result<()> {
    fs::write(sidecar_path(path.as_ref()), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

/// Reads `<path>.json` if present.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Option<serde_json::Value>> {
    let p = sidecar_path(path.as_ref());
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(p)?)?))
}
