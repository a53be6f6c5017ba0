use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Module, Real};
use crate::error::{Result, UadError};

const MAGIC: &[u8; 8] = b"UADPARAM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub kind: String,
    pub dtype: String,
    /// Model configuration and any extra bookkeeping supplied by the caller.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A parameter file: magic, format version, JSON header, then little-endian values
/// for each tensor in header order.
#[derive(Debug, Clone)]
pub struct Archive {
    pub header: ArchiveHeader,
    values: Vec<Vec<f64>>,
}

impl Archive {
    pub fn from_module<T: Real, M: Module<T> + ?Sized>(model: &M, kind: &str, meta: serde_json::Value) -> Self {
        let mut tensors = Vec::new();
        let mut values = Vec::new();
        model.visit("", &mut |name, p| {
            tensors.push(TensorEntry { name: name.to_string(), shape: p.shape.clone() });
            values.push(p.value.iter().map(|v| v.f64()).collect());
        });
        Self { header: ArchiveHeader { kind: kind.into(), dtype: T::DTYPE.into(), meta, tensors }, values }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + self.values.iter().map(|v| v.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for vals in &self.values {
            for &v in vals {
                match self.header.dtype.as_str() {
                    "f32" => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| UadError::Checkpoint { path: path.to_path_buf(), reason };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a parameter archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported archive version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: ArchiveHeader = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        let mut pos = 20 + hlen;
        let mut values = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let chunk = bytes.get(pos..pos + n * width).ok_or_else(|| bad(format!("truncated data for {}", t.name)))?;
            let vals = chunk
                .chunks_exact(width)
                .map(|c| if width == 4 { f32::from_le_bytes(c.try_into().expect("4")) as f64 } else { f64::from_le_bytes(c.try_into().expect("8")) })
                .collect();
            values.push(vals);
            pos += n * width;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| UadError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| UadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| UadError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies values into `model`; names, order and shapes must match exactly.
    pub fn restore<T: Real, M: Module<T> + ?Sized>(&self, model: &mut M, path: &Path) -> Result<()> {
        let mut problems = Vec::new();
        let mut i = 0;
        model.visit_mut("", &mut |name, p| {
            match self.header.tensors.get(i) {
                Some(t) if t.name == name && t.shape == p.shape => {
                    for (dst, &v) in p.value.iter_mut().zip(&self.values[i]) {
                        *dst = T::of(v);
                    }
                }
                Some(t) => problems.push(format!("{name} {:?} vs archived {} {:?}", p.shape, t.name, t.shape)),
                None => problems.push(format!("{name} missing from archive")),
            }
            i += 1;
        });
        if i != self.header.tensors.len() {
            problems.push(format!("archive has {} tensors, model has {i}", self.header.tensors.len()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(UadError::Checkpoint { path: path.to_path_buf(), reason: format!("parameter mismatch: {}", problems.join("; ")) })
        }
    }
}
