//! Binary parameter checkpoints: `TVOD`, a `u32` version and tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! dims and the values as little-endian `f32`. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TVOD";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::contract(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::contract(format!("rank of {name} exceeds 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::contract(format!("dimension of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Named tensors in file order.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    let err = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(err(0, "not a TVOD checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(err(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.pos;
        let len =
            u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| err(at + 2, "parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(err(r.pos, "trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

/// Overwrites every parameter of `store` from the checkpoint. The names
/// and shapes must match exactly.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let tensors = decode(&bytes, path)?;
    if tensors.len() != store.len() {
        return Err(Error::contract(format!(
            "checkpoint holds {} tensors, the model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store.id(&name).ok_or_else(|| {
            Error::contract(format!("checkpoint tensor {name} is not a model parameter"))
        })?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::dim("checkpoint", dst.shape(), t.shape()));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
            *d = T::lit(s as f64);
        }
    }
    Ok(())
}
