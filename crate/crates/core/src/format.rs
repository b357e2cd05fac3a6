//! Binary container shared by the model checkpoint (`FKVM`), gate weight
//! (`FKVZ`) and target shard (`FKVT`) files.
//!
//! Layout: 4-byte magic, `u32` LE version, `u32` LE header length, UTF-8 JSON
//! header of that length, then raw little-endian `f32` payload until EOF.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

/// Serializes a container into bytes.
pub fn encode_container<H: serde::Serialize>(
    magic: &[u8; 4],
    header: &H,
    payload: &[f32],
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a container, checking magic and version.
pub fn decode_container<H: serde::de::DeserializeOwned>(
    magic: &[u8; 4],
    bytes: &[u8],
) -> Result<(H, Vec<f32>)> {
    let expected = String::from_utf8_lossy(magic);
    if bytes.len() < PREAMBLE {
        return Err(Error::Format(format!(
            "file too short for a {expected} container ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"{expected}\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {expected} version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[PREAMBLE..];
    if body.len() < header_len {
        return Err(Error::Format(format!(
            "truncated {expected} header: declared {header_len} bytes, {} available",
            body.len()
        )));
    }
    let header: H = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("{expected} header: {e}")))?;
    let raw = &body[header_len..];
    if !raw.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "{expected} payload length {} is not a multiple of 4",
            raw.len()
        )));
    }
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

/// Reads only the JSON header of any container, returning the magic too.
pub fn peek_header(bytes: &[u8]) -> Result<([u8; 4], u32, serde_json::Value)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format("file too short".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = PREAMBLE + header_len;
    if bytes.len() < end {
        return Err(Error::Format("truncated header".into()));
    }
    let value =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| Error::Format(e.to_string()))?;
    Ok((magic, version, value))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Hdr {
        n: usize,
    }

    #[test]
    fn container_roundtrip_is_exact() {
        let payload = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-12];
        let bytes = encode_container(b"TEST", &Hdr { n: 4 }, &payload).unwrap();
        let (h, p): (Hdr, Vec<f32>) = decode_container(b"TEST", &bytes).unwrap();
        assert_eq!(h, Hdr { n: 4 });
        let a: Vec<u32> = payload.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_names_the_expected_one() {
        let bytes = encode_container(b"ABCD", &Hdr { n: 0 }, &[]).unwrap();
        let err = decode_container::<Hdr>(b"FKVZ", &bytes).unwrap_err();
        assert!(err.to_string().contains("\"FKVZ\""), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = encode_container(b"FKVM", &Hdr { n: 0 }, &[]).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_container::<Hdr>(b"FKVM", &bytes).unwrap_err();
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.bin");
        write_atomic(&path, b"xyz").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"xyz");
    }
}
