//! Flat binary parameter files.
//!
//! Layout (all integers little-endian):
//! `b"DSTP"`, version `u32`, tensor count `u32`, then per tensor:
//! name length `u32`, UTF-8 name, rank `u32`, `rank × u64` dims, and
//! `numel × f64` values.

use std::io::{Read, Write};

use super::{DiffError, Tensor};

pub const MAGIC: [u8; 4] = *b"DSTP";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(mut out: W, params: &[(String, Tensor)]) -> Result<(), DiffError> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, DiffError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(DiffError::Format("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(DiffError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| DiffError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            input.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &[("w".to_string(), t.clone())]).unwrap();
        assert_eq!(&buf[..4], b"DSTP");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf.len(), 12 + 4 + 1 + 4 + 16 + 16);
        let back = read_params(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("w".to_string(), t)]);
    }

    #[test]
    fn rejects_foreign_files() {
        let err = read_params(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, DiffError::Format(_)));
    }
}
