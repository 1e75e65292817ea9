//! Little-endian read/write helpers for the binary file formats.

use std::io::{self, Read, Write};

use crate::error::{Co2Error, Result};

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Co2Error::TruncatedFile(what),
        _ => Co2Error::Io(e),
    })
}

macro_rules! reader {
    ($name:ident, $ty:ty) => {
        pub(crate) fn $name(r: &mut impl Read, what: &'static str) -> Result<$ty> {
            let mut buf = [0u8; std::mem::size_of::<$ty>()];
            read_exact(r, &mut buf, what)?;
            Ok(<$ty>::from_le_bytes(buf))
        }
    };
}

reader!(read_u8, u8);
reader!(read_u16, u16);
reader!(read_u32, u32);
reader!(read_u64, u64);

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, what: &'static str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub(crate) fn usize_to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Co2Error::InvalidConfig(format!("{what} {n} does not fit in u32")))
}
