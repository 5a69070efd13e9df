//! Shared layout of the binary artifact files:
//!
//! ```text
//! magic (4 bytes) | header_len (u32 LE) | header (UTF-8 JSON) | payload (f32 LE, row-major)
//! ```

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, UapError};

pub(crate) fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: impl IntoIterator<Item = f32>) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::with_capacity(8 + header.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| UapError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| UapError::io(&tmp, e))?;
    f.sync_all().map_err(|e| UapError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| UapError::io(path, e))
}

/// Parses a container, checking the magic and that the payload holds exactly
/// `expected_len(&header)` floats.
pub(crate) fn decode<H: DeserializeOwned>(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 4],
    expected_len: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 8 {
        return Err(UapError::format(path, "file shorter than the fixed preamble"));
    }
    if &bytes[..4] != magic {
        return Err(UapError::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if hlen > body.len() {
        return Err(UapError::format(
            path,
            format!("header length {hlen} exceeds file size"),
        ));
    }
    let header_text =
        std::str::from_utf8(&body[..hlen]).map_err(|e| UapError::format(path, format!("header is not UTF-8: {e}")))?;
    let header: H =
        serde_json::from_str(header_text).map_err(|e| UapError::format(path, format!("bad header: {e}")))?;
    let n = expected_len(&header).map_err(|e| match e {
        UapError::Format { .. } => e,
        other => UapError::format(path, other.to_string()),
    })?;
    let payload = &body[hlen..];
    if payload.len() != n * 4 {
        return Err(UapError::format(
            path,
            format!("payload has {} bytes, header declares {} floats", payload.len(), n),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| UapError::io(path, e))
}
