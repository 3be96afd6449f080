//! Binary feature container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic     4 bytes  "DACF"
//! version   u32      1
//! count     u32      number of sections
//! section*  name_len u32, name (UTF-8), rows u32, dim u32, rows·dim f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{DacError, Result};
use crate::numcore::Mat;

pub const MAGIC: &[u8; 4] = b"DACF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Section {
    pub fn new(name: impl Into<String>, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if rows * dim != data.len() {
            return Err(DacError::shape(format!(
                "section '{name}' declares {rows}x{dim} but holds {} values",
                data.len()
            )));
        }
        Ok(Self { name, rows, dim, data })
    }

    /// Narrows an f64 matrix to f32 storage; entries must stay finite.
    pub fn from_mat(name: impl Into<String>, m: &Mat) -> Result<Self> {
        Self::from_f64(name, m.rows(), m.cols(), m.data())
    }

    pub fn from_row(name: impl Into<String>, v: &[f64]) -> Result<Self> {
        Self::from_f64(name, 1, v.len(), v)
    }

    pub fn from_f64(name: impl Into<String>, rows: usize, dim: usize, data: &[f64]) -> Result<Self> {
        let name = name.into();
        let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        if let Some(i) = narrowed.iter().position(|v| !v.is_finite()) {
            return Err(DacError::data(format!(
                "section '{name}' entry {i} ({}) is not a finite f32",
                data[i]
            )));
        }
        Self::new(name, rows, dim, narrowed)
    }

    /// Widened copy as an f64 matrix.
    pub fn to_mat(&self) -> Result<Mat> {
        Mat::from_vec(self.rows, self.dim, self.to_f64())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn row(&self, r: usize) -> Option<Vec<f64>> {
        (r < self.rows).then(|| self.data[r * self.dim..(r + 1) * self.dim].iter().map(|&v| f64::from(v)).collect())
    }
}

/// Ordered collection of uniquely named sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureFile {
    sections: Vec<Section>,
    index: BTreeMap<String, usize>,
}

impl FeatureFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, section: Section) -> Result<()> {
        if self.index.contains_key(&section.name) {
            return Err(DacError::data(format!("duplicate section '{}'", section.name)));
        }
        self.index.insert(section.name.clone(), self.sections.len());
        self.sections.push(section);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.index.get(name).map(|&i| &self.sections[i])
    }

    /// Like [`get`](Self::get) but with an error naming the missing section.
    pub fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| DacError::data(format!("section '{name}' not found")))
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: usize = self.sections.iter().map(|s| 12 + s.name.len() + 4 * s.data.len()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.sections.len(), "section count")?.to_le_bytes());
        for s in &self.sections {
            if let Some(i) = s.data.iter().position(|v| !v.is_finite()) {
                return Err(DacError::data(format!("section '{}' entry {i} is not finite", s.name)));
            }
            if s.rows * s.dim != s.data.len() {
                return Err(DacError::shape(format!("section '{}' size mismatch", s.name)));
            }
            out.extend_from_slice(&to_u32(s.name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&to_u32(s.rows, "rows")?.to_le_bytes());
            out.extend_from_slice(&to_u32(s.dim, "dim")?.to_le_bytes());
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container; `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: String| DacError::Format {
            path: origin.to_path_buf(),
            msg,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4).ok_or_else(|| fail("file shorter than header".into()))?;
        if magic != MAGIC {
            return Err(fail(format!("bad magic {magic:?}")));
        }
        let version = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let count = cur.u32().ok_or_else(|| fail("truncated header".into()))?;
        let mut file = FeatureFile::new();
        for k in 0..count {
            let truncated = || fail(format!("truncated in section {k}"));
            let name_len = cur.u32().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(truncated)?)
                .map_err(|_| fail(format!("section {k} name is not UTF-8")))?
                .to_string();
            let rows = cur.u32().ok_or_else(truncated)? as usize;
            let dim = cur.u32().ok_or_else(truncated)? as usize;
            let n = rows
                .checked_mul(dim)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| fail(format!("section '{name}' size overflows")))?;
            let raw = cur
                .take(n)
                .ok_or_else(|| fail(format!("section '{name}' payload truncated: needs {n} bytes")))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("section '{name}' holds non-finite values")));
            }
            file.push(Section { name, rows, dim, data })
                .map_err(|e| fail(e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(file)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| DacError::data(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_features(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    let path = path.as_ref();
    let bytes = file.to_bytes()?;
    fs::write(path, bytes).map_err(|e| DacError::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DacError::io(path, e))?;
    FeatureFile::from_bytes(&bytes, path)
}
