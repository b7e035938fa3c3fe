//! Little-endian readers/writers shared by the binary file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })
}

pub(crate) fn read_magic<R: Read>(r: &mut R, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact(r, &mut found)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

macro_rules! le_reader {
    ($name:ident, $t:ty) => {
        pub(crate) fn $name<R: Read>(r: &mut R) -> Result<$t> {
            let mut b = [0u8; std::mem::size_of::<$t>()];
            read_exact(r, &mut b)?;
            Ok(<$t>::from_le_bytes(b))
        }
    };
}

le_reader!(read_u8, u8);
le_reader!(read_u16, u16);
le_reader!(read_u32, u32);
le_reader!(read_u64, u64);

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let bytes = n.checked_mul(8).ok_or(Error::DimensionOverflow)?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// True when the reader has no bytes left.
pub(crate) fn at_eof<R: std::io::BufRead>(r: &mut R) -> Result<bool> {
    Ok(r.fill_buf()?.is_empty())
}
