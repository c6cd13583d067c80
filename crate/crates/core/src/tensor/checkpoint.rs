//! Flat tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      4 bytes  "SRCK"
//! version    u8
//! meta_len   u32, then meta_len bytes of UTF-8 `key=value` lines
//! count      u32
//! count x record:
//!   name_len u32, name (UTF-8)
//!   dtype    u8   (1 = f32)
//!   ndim     u32, ndim x u64 dims
//!   payload  product(dims) x f32, row-major
//! ```

use std::collections::HashSet;
use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"SRCK";
pub const CONTAINER_VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

/// Named f32 tensors plus free-form metadata lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_container(mut w: impl Write, c: &Container) -> std::io::Result<()> {
    w.write_all(&CONTAINER_MAGIC)?;
    w.write_all(&[CONTAINER_VERSION])?;
    let mut meta = String::new();
    for (k, v) in &c.meta {
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    }
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(n, what)?)
            .map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn read_container(r: impl Read) -> Result<Container> {
    let mut r = Reader { inner: r };
    let magic = r.bytes(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u8("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_text = r.string(meta_len, "metadata")?;
    let mut meta = Vec::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata line without `=`: {line}")))?;
        meta.push((k.to_string(), v.to_string()));
    }
    let count = r.u32("record count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.string(name_len, "tensor name")?;
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("`{name}`: unsupported dtype {dtype}")));
        }
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let mut rest = Vec::new();
    r.inner
        .read_to_end(&mut rest)
        .map_err(|e| Error::Format(e.to_string()))?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(Container { meta, tensors })
}
