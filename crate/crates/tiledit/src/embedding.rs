//! `SEMB` embedding files: magic, little-endian `u32` dim, little-endian
//! `f32` values.

use std::path::Path;

use tiledit_core::semantic::SemanticEmbedding;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEMB";

pub fn encode_embedding(e: &SemanticEmbedding) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * e.dim());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
    for v in &e.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8]) -> Result<SemanticEmbedding> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::malformed("embedding", "missing SEMB magic"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != dim * 4 {
        return Err(Error::malformed(
            "embedding",
            format!("dim {dim} needs {} payload bytes, found {}", dim * 4, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(SemanticEmbedding::new(values))
}

pub fn save_embedding_file(e: &SemanticEmbedding, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embedding(e)).map_err(|err| Error::io(path, err))
}

/// Loads and, when `expected_dim` is given, checks the dimension.
pub fn load_embedding_file(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<SemanticEmbedding> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|err| Error::io(path, err))?;
    let e = decode_embedding(&bytes)?;
    match expected_dim {
        Some(d) if d != e.dim() => Err(Error::EmbeddingDim { found: e.dim(), expected: d }),
        _ => Ok(e),
    }
}
