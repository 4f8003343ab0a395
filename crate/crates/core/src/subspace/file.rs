use std::path::Path;

use super::{Subspace, SubspaceMethod};
use crate::numerics::io::{BinReader, BinWriter};
use crate::numerics::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SDSU";

/// `SDSU`, layer index (u32), method tag (u8), K (u32), β (f64), then μ_T as a
/// `1 x d` and U as a `d x K` `SDMX` block.
pub fn encode_subspace(s: &Subspace) -> Vec<u8> {
    let mut w = BinWriter::new();
    w.bytes(MAGIC);
    w.u32(s.layer_index as u32);
    w.u8(s.method.tag());
    w.u32(s.k as u32);
    w.f64(s.beta_used);
    w.matrix(&Matrix::row_vector(&s.mu_teacher));
    w.matrix(&s.u);
    w.finish()
}

pub fn decode_subspace(bytes: &[u8], context: &str) -> Result<Subspace> {
    let mut r = BinReader::new(bytes, context);
    r.magic(MAGIC)?;
    let layer_index = r.u32()? as usize;
    let tag = r.u8()?;
    let method = SubspaceMethod::from_tag(tag)
        .ok_or_else(|| r.malformed(format!("unknown method tag {tag}")))?;
    let k = r.u32()? as usize;
    let beta_used = r.f64()?;
    let mu = r.matrix()?;
    let u = r.matrix()?;
    r.expect_end()?;
    if mu.rows() != 1 || u.rows() != mu.cols() || u.cols() != k {
        return Err(Error::Format {
            context: context.to_string(),
            message: format!(
                "inconsistent shapes: mean {:?}, U {:?}, K {k}",
                mu.shape(),
                u.shape()
            ),
        });
    }
    Ok(Subspace {
        u,
        mu_teacher: mu.into_vec(),
        layer_index,
        k,
        beta_used,
        method,
        eigenvalues: Vec::new(),
    })
}

pub fn save_subspace(s: &Subspace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_subspace(s)).map_err(|e| Error::io(path, e))
}

pub fn load_subspace(path: impl AsRef<Path>) -> Result<Subspace> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_subspace(&bytes, &path.display().to_string())
}
