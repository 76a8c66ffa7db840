//! Binary checkpoint format for named tensors.
//!
//! Layout: magic `IOODG001`, entry count (u32 LE), then per entry:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
//! row-major f32 LE data.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IOODG001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_named(
    path: &Path,
    entries: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, entries.len() as u32)?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        write_u32(&mut w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_u32(&mut w, 2)?;
        write_u32(&mut w, t.rows() as u32)?;
        write_u32(&mut w, t.cols() as u32)?;
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_named(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let (rows, cols) = match rank {
            0 => (1, 1),
            1 => (dims[0], 1),
            2 => (dims[0], dims[1]),
            _ => {
                return Err(CheckpointError::Malformed(format!(
                    "tensor `{name}` has unsupported rank {rank}"
                )))
            }
        };
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let t = Tensor::from_vec(rows, cols, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        entries.push((name, t));
    }
    Ok(entries)
}
