//! Shared serialization helpers: little-endian binary primitives, SHA-256
//! digests, hex encoding, and a minimal CSV writer.
//!
//! Every on-disk artifact in the pipeline (datasets, detector, patches, VQA
//! models) is written through these helpers so the byte layout is uniform:
//! fixed 4-byte magic, u32 format version, then little-endian fields. All
//! floats are f64 bit patterns — artifacts are bit-reproducible by
//! construction and hashed/compared as raw bytes.

use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    BadVersion {
        what: String,
        expected: u32,
        found: u32,
    },
    #[error("configuration hash mismatch for {what}: artifact carries {found}, expected {expected}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("corrupt {what}: {detail}")]
    Corrupt { what: String, detail: String },
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<(), IoError> {
    Ok(w.write_all(&[v])?)
}

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<(), IoError> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64]) -> Result<(), IoError> {
    // One buffer per slice keeps large image/weight writes from degenerating
    // into millions of 8-byte syscalls.
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8, IoError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u16<R: Read>(r: &mut R) -> Result<u16, IoError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32, IoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, IoError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes a 4-byte magic plus u32 format version.
pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<(), IoError> {
    w.write_all(magic)?;
    write_u32(w, version)
}

/// Checks a 4-byte magic and an exact format version.
pub fn expect_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<(), IoError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(IoError::BadVersion {
            what: String::from_utf8_lossy(magic).into_owned(),
            expected: version,
            found: v,
        });
    }
    Ok(())
}

pub fn write_hash<W: Write>(w: &mut W, h: &[u8; 32]) -> Result<(), IoError> {
    Ok(w.write_all(h)?)
}

pub fn read_hash<R: Read>(r: &mut R) -> Result<[u8; 32], IoError> {
    let mut h = [0u8; 32];
    r.read_exact(&mut h)?;
    Ok(h)
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex32(h: &[u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in h {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Short prefix of a hash for file names and log lines.
pub fn hex12(h: &[u8; 32]) -> String {
    hex32(h)[..12].to_string()
}

/// Derives an independent stream seed from a base seed and a role tag, so
/// sibling RNGs (train vs val splits, per-item noise, poison sampling…)
/// never share a stream even when the base seed is reused.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    let h = sha256(&bytes);
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

/// One CSV row; fields are written as-is, so callers must not pass text
/// containing commas or newlines (nothing in this pipeline does).
pub fn write_csv_row<W: Write>(w: &mut W, fields: &[String]) -> Result<(), IoError> {
    debug_assert!(fields
        .iter()
        .all(|f| !f.contains(',') && !f.contains('\n')));
    Ok(writeln!(w, "{}", fields.join(","))?)
}

/// Formats an f64 for CSV with shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_primitives() {
        let mut buf = Vec::new();
        write_header(&mut buf, b"TEST", 3).unwrap();
        write_u16(&mut buf, 65535).unwrap();
        write_u64(&mut buf, u64::MAX - 1).unwrap();
        write_f64(&mut buf, -0.125).unwrap();
        write_f64_slice(&mut buf, &[1.5, -2.5]).unwrap();
        let mut r = buf.as_slice();
        expect_header(&mut r, b"TEST", 3).unwrap();
        assert_eq!(read_u16(&mut r).unwrap(), 65535);
        assert_eq!(read_u64(&mut r).unwrap(), u64::MAX - 1);
        assert_eq!(read_f64(&mut r).unwrap(), -0.125);
        assert_eq!(read_f64_vec(&mut r, 2).unwrap(), vec![1.5, -2.5]);
    }

    #[test]
    fn header_mismatches_are_detected() {
        let mut buf = Vec::new();
        write_header(&mut buf, b"AAAA", 1).unwrap();
        let mut r = buf.as_slice();
        assert!(matches!(
            expect_header(&mut r, b"BBBB", 1),
            Err(IoError::BadMagic { .. })
        ));
        let mut r = buf.as_slice();
        assert!(matches!(
            expect_header(&mut r, b"AAAA", 2),
            Err(IoError::BadVersion { .. })
        ));
    }

    #[test]
    fn sha256_and_hex_are_stable() {
        let h = sha256(b"abc");
        assert_eq!(
            hex32(&h),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(hex12(&h), "ba7816bf8f01");
    }
}
