//! IDX files: a big-endian magic `0x0000_08_nd` (unsigned bytes, `nd`
//! dimensions), `nd` big-endian u32 sizes, then the raw bytes.

use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, context: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Malformed {
            context: context.to_string(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, context: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, context)?;
    if magic != expected {
        return Err(Error::Format {
            context: context.to_string(),
            message: format!("bad magic 0x{magic:08x} at offset 0, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, context: &str) -> Result<&'a [u8]> {
    if bytes.len() < start + len {
        return Err(Error::Malformed {
            context: context.to_string(),
            offset: bytes.len() as u64,
            message: format!("truncated payload: expected {len} bytes after offset {start}"),
        });
    }
    if bytes.len() > start + len {
        return Err(Error::Malformed {
            context: context.to_string(),
            offset: (start + len) as u64,
            message: "trailing bytes".into(),
        });
    }
    Ok(&bytes[start..])
}

/// `(count, height, width, pixels)`
pub(super) fn decode_images(bytes: &[u8], context: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGES_MAGIC, context)?;
    let n = be_u32(bytes, 4, context)? as usize;
    let h = be_u32(bytes, 8, context)? as usize;
    let w = be_u32(bytes, 12, context)? as usize;
    let data = payload(bytes, 16, n * h * w, context)?;
    Ok((n, h, w, data.to_vec()))
}

pub(super) fn decode_labels(bytes: &[u8], context: &str) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, context)?;
    let n = be_u32(bytes, 4, context)? as usize;
    Ok(payload(bytes, 8, n, context)?.to_vec())
}

pub fn encode_idx_images(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % (height * width), 0);
    let n = pixels.len() / (height * width);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
