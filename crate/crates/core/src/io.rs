//! Shared container layout for every binary artifact:
//! 8-byte magic, little-endian u64 header length, JSON header, raw payload.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_container(w: &mut impl Write, magic: &[u8; 8], header: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    Ok(())
}

pub(crate) fn read_container(r: &mut impl Read, magic: &[u8; 8]) -> Result<Vec<u8>> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)
        .map_err(|_| Error::format("file too short for a header"))?;
    if &found != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::format("truncated header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::format(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::format("truncated header"))?;
    Ok(header)
}

/// First eight bytes of a file, if present.
pub fn peek_magic(path: impl AsRef<Path>) -> Result<Option<[u8; 8]>> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 8];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(Some(magic)),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn f32_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}
