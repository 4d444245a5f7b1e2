//! Binary container for named f64 arrays with an optional text trailer.
//!
//! One format serves both persisted feature sets and checkpoints: a magic
//! tag, a format version, and a sequence of named arrays; checkpoints append
//! a JSON trailer for non-array state. Layout (all integers little-endian):
//!
//! ```text
//! "GTD1"  u32 version  u32 array_count
//! per array: u16 name_len, name bytes (UTF-8), u8 dtype (0 = f64),
//!            u8 ndim, ndim x u32 dims, dims-product x f64 payload
//! optional trailer: u32 text_len, text bytes (UTF-8)
//! ```
//!
//! Reading is strict: wrong magic, unsupported version, unknown dtype,
//! truncated payloads, or trailing bytes all fail loudly. Array order is
//! preserved exactly, so write -> read -> write is byte-identical.

use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

pub const CONTAINER_MAGIC: [u8; 4] = *b"GTD1";
pub const CONTAINER_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("container io: {0}")]
    Io(#[from] std::io::Error),
    #[error("container format: {detail}")]
    Format { detail: String },
    #[error("container version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
}

fn format_err(detail: impl Into<String>) -> ContainerError {
    ContainerError::Format {
        detail: detail.into(),
    }
}

/// Ordered collection of named arrays plus an optional text trailer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrayContainer {
    arrays: Vec<(String, Tensor)>,
    text: Option<String>,
}

impl ArrayContainer {
    pub fn new() -> ArrayContainer {
        ArrayContainer::default()
    }

    /// Appends an array; names must be unique within the container.
    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<(), ContainerError> {
        if name.len() > u16::MAX as usize {
            return Err(format_err(format!("name of {} bytes is too long", name.len())));
        }
        if tensor.dims().len() > u8::MAX as usize {
            return Err(format_err("more than 255 dimensions"));
        }
        if tensor.dims().iter().any(|&d| d > u32::MAX as usize) {
            return Err(format_err("dimension exceeds u32"));
        }
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(format_err(format!("duplicate array name '{name}'")));
        }
        self.arrays.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn set_text(&mut self, text: Option<String>) {
        self.text = text;
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays
            .iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .arrays
            .iter()
            .map(|(n, t)| 2 + n.len() + 2 + 4 * t.dims().len() + 8 * t.len())
            .sum();
        let mut out = Vec::with_capacity(12 + payload + 4 + self.text.as_deref().map_or(0, str::len));
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, tensor) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(tensor.dims().len() as u8);
            for &d in tensor.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(text) = &self.text {
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ArrayContainer, ContainerError> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CONTAINER_MAGIC {
            return Err(format_err(format!("bad magic {magic:02x?}")));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(ContainerError::Version {
                found: version,
                supported: CONTAINER_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut container = ArrayContainer::new();
        for i in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err(format!("array {i}: name is not UTF-8")))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(format_err(format!("array '{name}': unknown dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(8 * numel)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
                .collect();
            let tensor = Tensor::from_vec(&dims, data)
                .map_err(|e| format_err(format!("array '{name}': {e}")))?;
            container
                .push(&name, tensor)
                .map_err(|e| format_err(format!("array {i}: {e}")))?;
        }
        if r.remaining() > 0 {
            let text_len = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(text_len)?)
                .map_err(|_| format_err("trailer is not UTF-8"))?
                .to_string();
            container.set_text(Some(text));
        }
        if r.remaining() > 0 {
            return Err(format_err(format!(
                "{} unexpected trailing bytes",
                r.remaining()
            )));
        }
        Ok(container)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), ContainerError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read_file(path: &Path) -> Result<ArrayContainer, ContainerError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ArrayContainer::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
