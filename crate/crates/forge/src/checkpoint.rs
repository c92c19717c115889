//! Flat binary checkpoint of named float arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes   "DNFT"
//! version u32       currently 1
//! count   u32       number of named arrays
//! per array:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents (rank x u32)
//!   payload  numel x f32 (little-endian)
//! ```
//!
//! Arrays are written in the order given and read back in file order; the
//! in-memory form is an ordered list of `(name, tensor)` pairs.

use crate::error::{ForgeError, Result};
use crate::tensor::{Scalar, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DNFT";
const VERSION: u32 = 1;

pub fn write<S: Scalar, W: Write>(mut w: W, arrays: &[(String, Tensor<S>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<S: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ForgeError::config("checkpoint: bad magic, not a DNFT file".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ForgeError::config(format!("checkpoint: unsupported version {}", version)));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ForgeError::config("checkpoint: array name is not UTF-8".to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_file<S: Scalar>(path: &Path, arrays: &[(String, Tensor<S>)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), arrays)
}

pub fn load_file<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f))
}
