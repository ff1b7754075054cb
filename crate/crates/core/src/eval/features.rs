//! Feature files.
//!
//! Binary layout, little-endian: `"FEAT"`, u32 dims, u32 count, u8 dtype
//! (0 = f32), u8 has_labels, then `count` rows of `dims` f32 values, each
//! followed by a u32 label when labels are present.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{FeverError, Result};
use crate::ndgrad::{Array, DType, Float};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
const HEADER_LEN: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub dims: usize,
    /// `count * dims` values, row-major.
    pub rows: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl FeatureFile {
    pub fn new(dims: usize, rows: Vec<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dims == 0 || rows.len() % dims != 0 {
            return Err(FeverError::Data(format!(
                "{} values do not form rows of width {dims}",
                rows.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() / dims {
                return Err(FeverError::Data(format!(
                    "{} labels for {} rows",
                    l.len(),
                    rows.len() / dims
                )));
            }
        }
        Ok(FeatureFile { dims, rows, labels })
    }

    pub fn from_array<T: Float>(a: &Array<T>, labels: Option<Vec<u32>>) -> Result<Self> {
        if a.ndim() != 2 {
            return Err(FeverError::Shape {
                op: "feature_file",
                lhs: a.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        Self::new(a.shape()[1], a.data().iter().map(|v| v.as_f64() as f32).collect(), labels)
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.dims
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dims..(i + 1) * self.dims]
    }

    pub fn to_array<T: Float>(&self) -> Array<T> {
        Array::new(
            &[self.count(), self.dims],
            self.rows.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("validated feature shape")
    }

    pub fn labels_usize(&self) -> Result<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| l.iter().map(|&v| v as usize).collect())
            .ok_or_else(|| FeverError::Data("feature file has no labels".into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.count();
        let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * self.dims + 4));
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(DType::F32.tag());
        out.push(self.labels.is_some() as u8);
        for i in 0..n {
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(l) = &self.labels {
                out.extend_from_slice(&l[i].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| FeverError::Data(format!("feature file: {msg}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let dims = u32_at(4) as usize;
        let count = u32_at(8) as usize;
        if bytes[12] != DType::F32.tag() {
            return Err(bad(&format!("unsupported dtype tag {}", bytes[12])));
        }
        let has_labels = match bytes[13] {
            0 => false,
            1 => true,
            v => return Err(bad(&format!("label flag {v} is not 0 or 1"))),
        };
        let row_len = 4 * dims + if has_labels { 4 } else { 0 };
        if bytes.len() - HEADER_LEN != count * row_len {
            return Err(bad(&format!(
                "expected {} payload bytes for {count} rows, found {}",
                count * row_len,
                bytes.len() - HEADER_LEN
            )));
        }
        let mut rows = Vec::with_capacity(count * dims);
        let mut labels = has_labels.then(|| Vec::with_capacity(count));
        for r in bytes[HEADER_LEN..].chunks_exact(row_len.max(1)).take(count) {
            rows.extend(r[..4 * dims].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
            if let Some(l) = labels.as_mut() {
                l.push(u32::from_le_bytes(r[4 * dims..].try_into().unwrap()));
            }
        }
        Self::new(dims, rows, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| FeverError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FeverError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| FeverError::Data(format!("{}: {e}", path.display())))
    }

    /// CSV with header `f0,...,f{d-1}[,label]`; values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = (0..self.dims).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
        if self.labels.is_some() {
            s.push_str(",label");
        }
        s.push('\n');
        for i in 0..self.count() {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            if let Some(l) = &self.labels {
                let _ = write!(s, ",{}", l[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| FeverError::io(path, e))
    }
}
