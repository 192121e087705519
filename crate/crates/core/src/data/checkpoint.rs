//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RCMC" | version u32 | count u32
//! count × { name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32×ndim | values }
//! crc32 u32 over every preceding byte
//! ```
//!
//! Entries are written in name order, so equal stores give equal files.
//! Optimizer momentum is not part of a checkpoint. The network structure is
//! kept in a JSON sidecar next to the weights (`<path>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::{Layout, Network};
use crate::tensor::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RCMC";
pub const VERSION: u32 = 1;

/// One tensor as stored, independent of any model code.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let values: Vec<T> = match self.dtype {
            DType::F32 => self
                .payload
                .chunks_exact(size)
                .map(|b| T::c(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => self.payload.chunks_exact(size).map(|b| T::c(f64::read_le(b))).collect(),
        };
        Tensor::new(self.dims.clone(), values)
    }
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for name in store.sorted_names() {
        let value = store.value(name)?;
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        let ndim = u8::try_from(value.ndim()).map_err(|_| Error::Checkpoint(format!("`{name}` has too many dims")))?;
        out.push(ndim);
        for &d in value.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("`{name}` dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&value.le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * dtype.size())?.to_vec();
        entries.push(Entry {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(entries)
}

/// Path of the layout sidecar.
pub fn layout_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    let bytes = encode(&net.store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = layout_path(path);
    let json = serde_json::to_string_pretty(&net.layout)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// List the tensors of a checkpoint without building a model.
pub fn inspect_checkpoint(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let entries = inspect_checkpoint(path)?;
    let side = layout_path(path);
    let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let layout: Layout = serde_json::from_str(&json)?;
    let mut store = ParamStore::new();
    for e in &entries {
        store.insert(&e.name, e.tensor::<T>()?, false)?;
    }
    let mut net = Network::from_parts(layout, store);
    net.apply_param_roles()
        .map_err(|e| Error::Checkpoint(format!("weights do not match the layout: {e}")))?;
    Ok(net)
}
