//! Named-tensor container used for checkpoints and candidate score files.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic "JFAATENS" | version | meta_len | meta (UTF-8 JSON) | n_tensors
//! per tensor: name_len | name | dtype (u8: 0=f32, 1=f64, 2=u32) | rows | cols | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JFAATENS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U32(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self { name: name.into(), rows, cols, data: TensorData::F64(data) }
    }

    pub fn u32(name: impl Into<String>, rows: usize, cols: usize, data: Vec<u32>) -> Self {
        Self { name: name.into(), rows, cols, data: TensorData::U32(data) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_len(&mut out, self.meta.len())?;
        out.extend_from_slice(self.meta.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.rows.checked_mul(t.cols) != Some(t.data.len()) {
                return Err(Error::Shape(format!(
                    "tensor {} declares {}x{} but holds {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
            put_len(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.tag());
            put_len(&mut out, t.rows)?;
            put_len(&mut out, t.cols)?;
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "bad magic, not a tensor container"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(path, format!("tensor {name}: dimension overflow")))?;
            let width = match tag {
                0 | 2 => 4,
                1 => 8,
                _ => return Err(Error::format(path, format!("tensor {name}: unknown dtype {tag}"))),
            };
            let nbytes = count
                .checked_mul(width)
                .ok_or_else(|| Error::format(path, format!("tensor {name}: dimension overflow")))?;
            let raw = r.take(nbytes)?;
            let data = match tag {
                0 => TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => TensorData::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            tensors.push(NamedTensor { name, rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Shape(format!("length {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
