//! NTSR tensor files.
//!
//! Layout, all little-endian: magic `NTSR`, `u32` version, `u32` ndim,
//! `ndim x u32` extents, then the payload as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"NTSR";
pub const NTSR_VERSION: u32 = 1;

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&NTSR_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != NTSR_VERSION {
        return Err(Error::Version { found: version, supported: NTSR_VERSION });
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::Parse(format!("tensor ndim {ndim} out of range")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(&mut r)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        read_exact(&mut r, &mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(bytes.as_slice())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Parse("truncated tensor file".into())
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical_at_storage_precision() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.0e-8, 1e6, -0.125]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor(&b"XXXX"[..]), Err(Error::Parse(_))));
        let t = Tensor::from_slice(&[1.0, 2.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_tensor(buf.as_slice()), Err(Error::Parse(_))));
    }
}
