//! Flat little-endian tensor container.
//!
//! Layout: `b"ESBM"`, version `u32`, record count `u32`, then per record a
//! `u32` name length, the UTF-8 name, a `u32` rank, `rank` extents as `u64`,
//! and the row-major `f64` payload. A trailing `u64` FNV-1a hash of all
//! preceding bytes catches corruption that leaves the structure intact.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESBM";
pub const VERSION: u32 = 2;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn write_tensors<W: Write>(mut out: W, tensors: &ParamSet) -> Result<()> {
    let mut w = Vec::new();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let hash = fnv1a(&w);
    out.write_all(&w)?;
    out.write_all(&hash.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable: {e}"))
}

// Guards against absurd allocations from corrupted headers.
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_NUMEL: u64 = 1 << 32;

pub fn read_tensors<R: Read>(mut input: R) -> Result<ParamSet> {
    let mut all = Vec::new();
    input.read_to_end(&mut all)?;
    if all.len() < 12 {
        return Err(Error::Checkpoint("truncated or unreadable: file too short".into()));
    }
    let (body, trailer) = all.split_at(all.len() - 8);
    let mut r = body;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    if fnv1a(body).to_le_bytes() != trailer {
        return Err(Error::Checkpoint("checksum mismatch; file is corrupted".into()));
    }
    let count = read_u32(&mut r)?;
    let mut out = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        if len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("bad rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1u64;
        for _ in 0..rank {
            let e = read_u64(&mut r)?;
            numel = numel.saturating_mul(e);
            shape.push(e as usize);
        }
        if numel == 0 || numel > MAX_NUMEL {
            return Err(Error::Checkpoint(format!("bad extents {shape:?} for `{name}`")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_u64(&mut r)?.to_le_bytes()));
        }
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path)?;
    read_tensors(bytes.as_slice())
}
