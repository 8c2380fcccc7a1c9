//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian: `"HEVT"`, `u32` version, `u32` entry count, then per
//! entry `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims, and `f32` values.
//! Entries are written in lexicographic name order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"HEVT";
pub const VERSION: u32 = 1;

/// Serialises every parameter as 32-bit floats.
pub fn encode<T: Element>(ps: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + ps.scalar_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(ps.len()).map_err(|_| too_big("entry count"))?.to_le_bytes());
    for (name, t) in ps.iter() {
        let len = u16::try_from(name.len()).map_err(|_| too_big(name))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| too_big(name))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big(name))?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Checkpoint(format!("`{what}` exceeds the format's field width"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a snapshot into a store of 32-bit tensors.
pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        ps.insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate parameter `{name}`")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ps)
}

pub fn save<T: Element>(ps: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ps)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    decode(&std::fs::read(path)?)
}

/// Copies `loaded` into `model` after checking that names and shapes match exactly.
pub fn load_into<T: Element>(model: &mut Model<T>, loaded: &ParamStore<f32>) -> Result<()> {
    for name in loaded.names() {
        if model.params.get(name).is_none() {
            return Err(Error::Checkpoint(format!("checkpoint parameter `{name}` does not exist in the model")));
        }
    }
    for (name, t) in model.params.iter_mut() {
        let src = loaded
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                src.shape(),
                t.shape()
            )));
        }
        for (d, &s) in t.data_mut().iter_mut().zip(src.data()) {
            *d = T::from_f64_lossy(f64::from(s));
        }
    }
    Ok(())
}
