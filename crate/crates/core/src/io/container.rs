//! Binary array container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `DPCT` |
//! | 4 | format version, `u32` |
//! | 8 | header length in bytes, `u64` |
//! | n | UTF-8 JSON header |
//! | … | payload: the arrays in header order, IEEE-754 little-endian |
//!
//! Each array in the header declares its name, shape, dtype, units and
//! element ordering; its payload length is `product(shape) · dtype size`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DPCT";
pub const FORMAT_VERSION: u32 = 1;

/// Voxel-major ordering with x fastest, then y, then z.
pub const ORDER_VOXELS: &str = "frame-major, voxel lexicographic x-fastest";
/// Trace ordering of measurement sets.
pub const ORDER_TRACES: &str = "frame-major, channel-major then time";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Float64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub units: String,
    pub ordering: String,
}

impl ArraySpec {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::Float32,
            ArrayData::F64(_) => Dtype::Float64,
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub spec: ArraySpec,
    pub data: ArrayData,
}

impl Array {
    pub fn f64(name: &str, shape: Vec<usize>, units: &str, ordering: &str, data: Vec<f64>) -> Result<Self> {
        Self::new(
            ArraySpec {
                name: name.into(),
                shape,
                dtype: Dtype::Float64,
                units: units.into(),
                ordering: ordering.into(),
            },
            ArrayData::F64(data),
        )
    }

    pub fn new(spec: ArraySpec, data: ArrayData) -> Result<Self> {
        if spec.dtype != data.dtype() {
            return Err(Error::Format(format!("array '{}' declares {:?} but holds {:?}", spec.name, spec.dtype, data.dtype())));
        }
        if spec.element_count() != data.len() {
            return Err(Error::Format(format!(
                "array '{}' has shape {:?} but {} elements",
                spec.name,
                spec.shape,
                data.len()
            )));
        }
        Ok(Self { spec, data })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    arrays: Vec<ArraySpec>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A typed set of named arrays with free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn new(kind: &str, metadata: serde_json::Value, arrays: Vec<Array>) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.spec.name == name)
            .ok_or_else(|| Error::Format(format!("{} container has no array '{name}'", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            arrays: self.arrays.iter().map(|a| a.spec.clone()).collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * a.spec.dtype.size()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(Error::Format("missing DPCT magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated container header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for spec in header.arrays {
            let size = spec.dtype.size();
            let end = spec
                .element_count()
                .checked_mul(size)
                .and_then(|n| n.checked_add(offset))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format(format!("payload of array '{}' is truncated", spec.name)))?;
            let raw = &bytes[offset..end];
            let data = match spec.dtype {
                Dtype::Float32 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                Dtype::Float64 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            arrays.push(Array::new(spec, data)?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the payload", bytes.len() - offset)));
        }
        Ok(Self {
            kind: header.kind,
            metadata: header.metadata,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
