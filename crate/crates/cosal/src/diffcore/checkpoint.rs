//! Checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CSK1"
//! version u32      currently 1
//! record* until end of file, each:
//!   name_len u32, name (UTF-8), rank u32, extents (rank x u32),
//!   payload (product(extents) x f32)
//! ```
//!
//! Values are stored as f32 regardless of the in-memory scalar type; loading
//! yields f32 tensors and callers cast as needed. Readers accept any set of
//! record names so that inference-only checkpoints (e.g. without a training
//! head) stay loadable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CosalError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSK1";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save<F: Real, P: AsRef<Path>>(path: P, tensors: &[(&str, &Tensor<F>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            let f = v.to_f32().ok_or_else(|| {
                CosalError::CheckpointFormat(format!("value in {name} is not representable"))
            })?;
            w.write_all(&f.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = std::fs::read(path)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize, what: &str| -> Result<std::ops::Range<usize>> {
        if *off + n > buf.len() {
            return Err(CosalError::CheckpointFormat(format!(
                "truncated while reading {what} at byte {off}"
            )));
        }
        let r = *off..*off + n;
        *off += n;
        Ok(r)
    };
    let rd_u32 = |off: &mut usize, what: &str| -> Result<u32> {
        let r = take(off, 4, what)?;
        Ok(u32::from_le_bytes(buf[r].try_into().unwrap()))
    };

    let magic = take(&mut off, 4, "magic")?;
    if &buf[magic] != CHECKPOINT_MAGIC {
        return Err(CosalError::CheckpointFormat("bad magic".into()));
    }
    let version = rd_u32(&mut off, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CosalError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }

    let mut out = Vec::new();
    while off < buf.len() {
        let name_len = rd_u32(&mut off, "name length")? as usize;
        let name_range = take(&mut off, name_len, "tensor name")?;
        let name = std::str::from_utf8(&buf[name_range])
            .map_err(|_| CosalError::CheckpointFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = rd_u32(&mut off, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd_u32(&mut off, "extent")? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = take(&mut off, count * 4, &format!("payload of {name}"))?;
        let data: Vec<f32> = buf[payload]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}
