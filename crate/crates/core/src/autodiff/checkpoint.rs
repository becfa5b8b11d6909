//! Named-tensor checkpoint container.
//!
//! Binary file, little-endian:
//!
//! ```text
//! magic   b"RSCK"
//! version u32 = 1
//! count   u32
//! count x {
//!     name_len u32, name (utf-8)
//!     ndim u32, dims u64 x ndim
//!     dtype u8           0 = f64, 1 = f32
//!     data               numel values of dtype
//! }
//! ```
//!
//! Next to it, `<file>.manifest.toml` carries `format_version`, free-form
//! metadata and the tensor list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RSCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().to_vec(),
            dtype: DType::F64,
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut shape = [1usize; 4];
        if self.dims.len() > 4 {
            return Err(Error::shape(format!(
                "tensor '{}' has more than 4 dims",
                self.name
            )));
        }
        let off = 4 - self.dims.len();
        shape[off..].copy_from_slice(&self.dims);
        Tensor::from_vec(shape, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, p)| NamedTensor::from_tensor(&p.name, &p.value))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every store parameter from the checkpoint. Missing names and
    /// shape disagreements are errors naming the layer.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let rec = self
                .get(&name)
                .ok_or_else(|| Error::shape(format!("checkpoint lacks parameter '{name}'")))?;
            let t = rec.to_tensor()?;
            let want = store.value(id).shape();
            if t.shape() != want {
                return Err(Error::shape(format!(
                    "parameter '{name}': checkpoint shape {:?}, model shape {want:?}",
                    rec.dims
                )));
            }
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.push(t.dtype.code());
            match t.dtype {
                DType::F64 => t
                    .data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => t
                    .data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.err("tensor name is not utf-8"))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let (dtype, data) = match r.take(1)?[0] {
                0 => (
                    DType::F64,
                    r.take(numel * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => (
                    DType::F32,
                    r.take(numel * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect(),
                ),
                other => return Err(r.err(&format!("unknown dtype code {other}"))),
            };
            tensors.push(NamedTensor {
                name,
                dims,
                dtype,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last record"));
        }
        Ok(Self {
            tensors,
            metadata: BTreeMap::new(),
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ManifestEntry {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    dtype: t.dtype,
                })
                .collect(),
        }
    }

    /// Writes the binary container and its manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let text =
            toml::to_string(&self.manifest()).map_err(|e| Error::format(&mpath, e.to_string()))?;
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    /// Reads the container; the manifest, when present, supplies metadata and
    /// must agree on the format version.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ck = Self::from_bytes(&bytes, path)?;
        let mpath = manifest_path(path);
        if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let m: Manifest =
                toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
            if m.format_version != FORMAT_VERSION {
                return Err(Error::format(
                    &mpath,
                    format!("manifest format_version {} unsupported", m.format_version),
                ));
            }
            ck.metadata = m.metadata;
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::format(self.path, format!("{msg} (byte offset {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
