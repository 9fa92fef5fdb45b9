//! `MFDC` checkpoint files.
//!
//! ```text
//! "MFDC" | u32 version (1) | u32 count |
//!   count × ( u16 name_len | name (UTF-8) | u8 rank | rank × u32 extent | f32 values )
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFDC";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, store: &ParamStore<f32>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[p.value.rank() as u8])?;
        for &d in p.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), store).map_err(|e| Error::io(path, e))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("checkpoint truncated while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse every `(name, tensor)` record of a checkpoint stream.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected \"MFDC\""
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r, "parameter count")?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut r, &mut len, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format("parameter name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r, "extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::format(format!("parameter {name}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}

/// Load a checkpoint into an already-instantiated store. Names, order and
/// shapes must match exactly.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_checkpoint(BufReader::new(file))?;
    if records.len() != store.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} parameters, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for (id, (name, tensor)) in store.ids().collect::<Vec<_>>().into_iter().zip(records) {
        let p = store.get_mut(id);
        if p.name != name {
            return Err(Error::format(format!(
                "checkpoint parameter {name:?} where model expects {:?}",
                p.name
            )));
        }
        if p.value.shape() != tensor.shape() {
            return Err(Error::format(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    Ok(())
}
