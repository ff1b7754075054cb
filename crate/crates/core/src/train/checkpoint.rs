//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FEVR" | u32 version | u32 len | len bytes of UTF-8 JSON config
//! u32 array count, then per array:
//!   u32 name len | name | u8 dtype tag | u32 rank | u64 dims[rank] | payload
//! ```
//!
//! Dtype tags 0 and 1 are f32 and f64; 2 is u64 and 3 is u8, used for
//! sampler and rng state.

use std::fs;
use std::path::Path;

use crate::error::{FeverError, Result};
use crate::ndgrad::{Array, DType, Float};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FEVR";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_U64: u8 = 2;
const TAG_U8: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => DType::F32.tag(),
            ArrayData::F64(_) => DType::F64.tag(),
            ArrayData::U64(_) => TAG_U64,
            ArrayData::U8(_) => TAG_U8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn float<T: Float>(name: impl Into<String>, a: &Array<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(a.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => ArrayData::F64(a.data().iter().map(|v| v.as_f64()).collect()),
        };
        NamedArray {
            name: name.into(),
            dims: a.shape().to_vec(),
            data,
        }
    }

    pub fn u64s(name: impl Into<String>, v: Vec<u64>) -> Self {
        NamedArray {
            name: name.into(),
            dims: vec![v.len()],
            data: ArrayData::U64(v),
        }
    }

    pub fn bytes(name: impl Into<String>, v: Vec<u8>) -> Self {
        NamedArray {
            name: name.into(),
            dims: vec![v.len()],
            data: ArrayData::U8(v),
        }
    }

    /// Converts back to a float array; the stored dtype must match `T`.
    pub fn to_array<T: Float>(&self) -> Result<Array<T>> {
        let vals: Vec<T> = match (&self.data, T::DTYPE) {
            (ArrayData::F32(v), DType::F32) => v.iter().map(|&x| T::of(x as f64)).collect(),
            (ArrayData::F64(v), DType::F64) => v.iter().map(|&x| T::of(x)).collect(),
            _ => {
                return Err(FeverError::Checkpoint(format!(
                    "array `{}` has dtype tag {}, expected {:?}",
                    self.name,
                    self.data.tag(),
                    T::DTYPE
                )))
            }
        };
        Array::new(&self.dims, vals)
    }
}

/// A decoded checkpoint: the config blob and its arrays in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl CheckpointFile {
    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| FeverError::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(FeverError::Checkpoint(format!("array `{name}` is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(FeverError::Checkpoint(format!("array `{name}` is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let blob = serde_json::to_vec(&self.config)
            .map_err(|e| FeverError::Checkpoint(format!("config blob: {e}")))?;
        put_len(&mut out, blob.len())?;
        out.extend_from_slice(&blob);
        put_len(&mut out, self.arrays.len())?;
        for a in &self.arrays {
            if a.dims.iter().product::<usize>() != a.data.len() {
                return Err(FeverError::Checkpoint(format!(
                    "array `{}` dims {:?} do not match {} values",
                    a.name,
                    a.dims,
                    a.data.len()
                )));
            }
            put_len(&mut out, a.name.len())?;
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.tag());
            put_len(&mut out, a.dims.len())?;
            for &d in &a.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(FeverError::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FeverError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let blob_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(blob_len)?)
            .map_err(|e| FeverError::Checkpoint(format!("config blob: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| FeverError::Checkpoint("array name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FeverError::Checkpoint(format!("array `{name}` is too large")))?;
            let width = match tag {
                0 => 4,
                1 | TAG_U64 => 8,
                TAG_U8 => 1,
                _ => return Err(FeverError::Checkpoint(format!("array `{name}` has unknown dtype tag {tag}"))),
            };
            let raw = r
                .take(n.checked_mul(width).unwrap_or(usize::MAX))
                .map_err(|_| FeverError::Checkpoint(format!("array `{name}` is truncated")))?;
            let data = match tag {
                0 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                TAG_U64 => ArrayData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => ArrayData::U8(raw.to_vec()),
            };
            arrays.push(NamedArray { name, dims, data });
        }
        if r.at != bytes.len() {
            return Err(FeverError::Checkpoint(format!(
                "{} trailing bytes after the last array",
                bytes.len() - r.at
            )));
        }
        Ok(CheckpointFile { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| FeverError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FeverError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| FeverError::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FeverError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CheckpointFile {
        CheckpointFile {
            config: serde_json::json!({"role": "teacher", "step": 3}),
            arrays: vec![
                NamedArray::float("w", &Array::<f32>::from_f64(&[2, 2], &[1.0, -0.5, 3.25, f32::MIN_POSITIVE as f64]).unwrap()),
                NamedArray::float("d", &Array::<f64>::from_vec(vec![0.1, 1e-300])),
                NamedArray::u64s("order", vec![3, 1, u64::MAX]),
                NamedArray::bytes("seed", vec![7; 32]),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = CheckpointFile::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let w: Array<f32> = back.get("w").unwrap().to_array().unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.data()[3], f32::MIN_POSITIVE);
        assert_eq!(back.u64s("order").unwrap()[2], u64::MAX);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FEVR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        let blob_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let blob: serde_json::Value = serde_json::from_slice(&bytes[12..12 + blob_len]).unwrap();
        assert_eq!(blob["role"], "teacher");
    }

    #[test]
    fn edited_version_byte_is_a_version_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        match CheckpointFile::from_bytes(&bytes).unwrap_err() {
            FeverError::CheckpointVersion { found, expected } => {
                assert_eq!((found, expected), (9, CHECKPOINT_VERSION));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_magic_and_truncation_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CheckpointFile::from_bytes(&bad), Err(FeverError::Checkpoint(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(CheckpointFile::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes;
        long.push(0);
        assert!(CheckpointFile::from_bytes(&long).is_err());
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let c = sample();
        assert!(c.get("w").unwrap().to_array::<f64>().is_err());
        assert!(c.get("order").unwrap().to_array::<f32>().is_err());
        assert!(c.bytes("order").is_err());
        assert!(c.get("nope").is_err());
    }

    #[test]
    fn file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.fevr");
        sample().save(&p).unwrap();
        assert_eq!(CheckpointFile::load(&p).unwrap(), sample());
        assert!(matches!(
            CheckpointFile::load(&tmp.path().join("missing")),
            Err(FeverError::Io { .. })
        ));
    }
}
