//! Little-endian primitives shared by the binary formats.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn truncated(what: &str) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::TruncatedPayload(format!("stream ended while reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

pub(crate) fn read_magic(r: &mut impl Read, expected: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(truncated("magic"))?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated(what))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_version(r: &mut impl Read, expected: u32) -> Result<()> {
    let found = read_u32(r, "version")?;
    if found != expected {
        return Err(Error::VersionMismatch { expected, found });
    }
    Ok(())
}

/// Reads exactly `len` bytes without trusting `len` for the up-front allocation.
pub(crate) fn read_bytes(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::TruncatedPayload(format!(
            "{what}: expected {len} bytes, got {}",
            buf.len()
        )));
    }
    Ok(buf)
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<usize> {
    w.write_all(&v.to_le_bytes())?;
    Ok(4)
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::OutOfRange(format!("{what} = {v} does not fit in u32")))
}

/// Writes values as f32-LE; returns the byte count.
pub(crate) fn write_f32s<'a>(w: &mut impl Write, values: impl Iterator<Item = &'a f64>) -> Result<usize> {
    let mut buf = Vec::new();
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(buf.len())
}

/// Reads `n` f32-LE values widened to f64.
pub(crate) fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let buf = read_bytes(r, n * 4, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn write_f64s<'a>(w: &mut impl Write, values: impl Iterator<Item = &'a f64>) -> Result<usize> {
    let mut buf = Vec::new();
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(buf.len())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f64>> {
    let buf = read_bytes(r, n * 8, what)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Rounds to the nearest value representable on disk.
pub fn storage_round(v: f64) -> f64 {
    v as f32 as f64
}
