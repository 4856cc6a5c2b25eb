//! Framing shared by the weight, checkpoint and cache files: 4 magic bytes,
//! a `u32` version, a `u64`-length-prefixed UTF-8 JSON header, then raw
//! little-endian arrays.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{FptError, Result};

pub fn write_preamble<W: Write, H: Serialize>(w: &mut W, magic: &[u8; 4], version: u32, header: &H) -> std::io::Result<u64> {
    let json = serde_json::to_vec(header).expect("header serializes");
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(16 + json.len() as u64)
}

/// Parses the preamble at the start of `bytes`; returns the header and the
/// offset where array data begins.
pub fn parse_preamble<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 4], version: u32, path: &Path) -> Result<(H, usize)> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(FptError::format(
            path,
            format!("missing {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(FptError::format(path, format!("version {found}, expected {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FptError::format(path, "truncated header"))?;
    let header = serde_json::from_slice(&bytes[16..end]).map_err(|e| FptError::format(path, e.to_string()))?;
    Ok((header, end))
}

pub fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn put_u32s(out: &mut Vec<u8>, values: &[u32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a little-endian byte buffer.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize, path: &'a Path) -> Self {
        Self { bytes, pos, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FptError::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FptError::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FptError::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| FptError::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| FptError::io(path, e))?;
    Ok(buf)
}

/// Writes `bytes` to `path` via a sibling temp file and a rename, removing the
/// temp file on failure.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("tmp")
    ));
    let res = (|| -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(FptError::io(path, e));
    }
    Ok(())
}
