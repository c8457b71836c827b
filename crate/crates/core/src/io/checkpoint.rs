//! EVFICKPT parameter checkpoints: magic "EVFICKPT", u32 version,
//! u32 count, then per parameter {u16 name length, UTF-8 name, u8 rank,
//! u32 dims, f32 data little-endian}. Values are stored at 32 bits.

use super::ByteReader;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8] = b"EVFICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        assert!(name.len() <= u16::MAX as usize, "parameter name too long");
        assert!(p.shape.len() <= u8::MAX as usize, "parameter rank too large");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            format!("unsupported checkpoint version {version}"),
            Some(at),
        ));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let at = r.offset();
        let name_bytes = r.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format("parameter name is not UTF-8", Some(at)))?
            .to_string();
        let rank = r.i8()? as u8 as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f32()? as f64);
        }
        store.insert(name, shape, data);
    }
    r.done()?;
    Ok(store)
}
