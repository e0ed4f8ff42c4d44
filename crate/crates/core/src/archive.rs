//! Shared on-disk container for measurement sets, phantoms, generator
//! checkpoints and latent matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"MRARCHV\0"
//! hdr_len    u64       length of the JSON header in bytes
//! header     hdr_len   UTF-8 JSON: {format_version, kind, meta, blocks[]}
//! payload    ...       concatenated blocks; f64 as IEEE-754 LE, u32 LE, u8 raw
//! ```
//!
//! Each block entry in the header records its name, dtype, shape, byte offset
//! into the payload and element count. Complex arrays are stored as f64 blocks
//! with a trailing dimension of 2 holding (real, imag).

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ReconError, Result};

pub const MAGIC: &[u8; 8] = b"MRARCHV\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U32,
    U8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: Value,
    blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
enum BlockData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

/// An in-memory archive: a kind tag, free-form JSON metadata and named typed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    kind: String,
    meta: Value,
    blocks: Vec<(BlockInfo, BlockData)>,
    payload_len: usize,
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Value::Null,
            blocks: Vec::new(),
            payload_len: 0,
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn meta(&self) -> &Value {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: Value) {
        self.meta = meta;
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockInfo> {
        self.blocks.iter().map(|(info, _)| info)
    }

    fn push(
        &mut self,
        name: &str,
        dtype: DType,
        shape: &[usize],
        data: BlockData,
        len: usize,
    ) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != len {
            return Err(ReconError::ShapeMismatch(format!(
                "block {name}: shape {shape:?} implies {expected} elements, got {len}"
            )));
        }
        if self.blocks.iter().any(|(b, _)| b.name == name) {
            return Err(ReconError::Format(format!("duplicate block name {name}")));
        }
        let info = BlockInfo {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.payload_len,
            len,
        };
        self.payload_len += len * dtype.width();
        self.blocks.push((info, data));
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let len = data.len();
        self.push(name, DType::F64, shape, BlockData::F64(data), len)
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) -> Result<()> {
        let len = data.len();
        self.push(name, DType::U32, shape, BlockData::U32(data), len)
    }

    pub fn push_u8(&mut self, name: &str, shape: &[usize], data: Vec<u8>) -> Result<()> {
        let len = data.len();
        self.push(name, DType::U8, shape, BlockData::U8(data), len)
    }

    /// Stores complex values as an f64 block with shape `shape ++ [2]`.
    pub fn push_complex(&mut self, name: &str, shape: &[usize], data: &[Complex64]) -> Result<()> {
        let mut full = shape.to_vec();
        full.push(2);
        let flat = data.iter().flat_map(|c| [c.re, c.im]).collect();
        self.push_f64(name, &full, flat)
    }

    fn find(&self, name: &str) -> Result<&(BlockInfo, BlockData)> {
        self.blocks
            .iter()
            .find(|(b, _)| b.name == name)
            .ok_or_else(|| ReconError::Format(format!("missing block {name}")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.find(name)?.0.shape)
    }

    pub fn f64(&self, name: &str) -> Result<&[f64]> {
        match &self.find(name)?.1 {
            BlockData::F64(v) => Ok(v),
            _ => Err(ReconError::Format(format!("block {name} is not f64"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<&[u32]> {
        match &self.find(name)?.1 {
            BlockData::U32(v) => Ok(v),
            _ => Err(ReconError::Format(format!("block {name} is not u32"))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<&[u8]> {
        match &self.find(name)?.1 {
            BlockData::U8(v) => Ok(v),
            _ => Err(ReconError::Format(format!("block {name} is not u8"))),
        }
    }

    pub fn complex(&self, name: &str) -> Result<Vec<Complex64>> {
        let shape = self.shape(name)?;
        if shape.last() != Some(&2) {
            return Err(ReconError::Format(format!("block {name} is not complex")));
        }
        Ok(self
            .f64(name)?
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blocks: self.blocks.iter().map(|(b, _)| b.clone()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &self.blocks {
            match data {
                BlockData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ReconError::Format("bad magic".into()));
        }
        let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hdr_len)
            .ok_or_else(|| ReconError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(ReconError::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &bytes[16 + hdr_len..];
        let mut archive = Archive::new(header.kind);
        archive.meta = header.meta;
        for info in header.blocks {
            let start = info.offset;
            let end = start + info.len * info.dtype.width();
            let raw = payload
                .get(start..end)
                .ok_or_else(|| ReconError::Format(format!("block {} out of bounds", info.name)))?;
            let data = match info.dtype {
                DType::F64 => BlockData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U32 => BlockData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U8 => BlockData::U8(raw.to_vec()),
            };
            archive.push(&info.name, info.dtype, &info.shape, data, info.len)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless the archive carries the expected kind tag.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(ReconError::Format(format!(
                "expected archive kind {kind}, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Stores an image series `(N, H, W)` as an archive of kind `image_series`.
pub fn image_series_to_archive(images: &ndarray::Array3<Complex64>) -> Result<Archive> {
    let (n, h, w) = images.dim();
    let mut a = Archive::new("image_series");
    a.set_meta(serde_json::json!({ "num_frames": n, "grid_shape": [h, w] }));
    let flat: Vec<Complex64> = images.iter().copied().collect();
    a.push_complex("images", &[n, h, w], &flat)?;
    Ok(a)
}

pub fn image_series_from_archive(a: &Archive) -> Result<ndarray::Array3<Complex64>> {
    a.expect_kind("image_series")?;
    complex3(a, "images")
}

/// Reads a complex block of shape `(a, b, c, 2)` into an array.
pub fn complex3(a: &Archive, name: &str) -> Result<ndarray::Array3<Complex64>> {
    let shape = a.shape(name)?.to_vec();
    if shape.len() != 4 {
        return Err(ReconError::Format(format!(
            "block {name} is not a complex 3-D array"
        )));
    }
    ndarray::Array3::from_shape_vec((shape[0], shape[1], shape[2]), a.complex(name)?)
        .map_err(|e| ReconError::Format(e.to_string()))
}
