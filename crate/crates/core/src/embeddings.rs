//! Precomputed acoustic-embedding ingestion (`EMB1` files) and mean pooling.
//!
//! `EMB1` layout, little-endian: magic `"EMB1"`, `u8` layer tag, `u32` rows,
//! `u32` cols (always 768), then `rows * cols` row-major `f32`.

use std::fs;
use std::path::Path;

use crate::audio::source_id_for;
use crate::error::{Error, Result};
use crate::features::Matrix;

pub const EMBEDDING_DIM: usize = 768;

const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 13;

/// Frame-level embeddings from one encoder layer for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    /// `L × 768`.
    pub frames: Matrix<f32>,
    /// Source layer, 1 to 4. Opaque beyond identifying the file.
    pub layer_tag: u8,
    pub source_id: String,
}

pub fn encode_embedding(seq: &EmbeddingSequence) -> Vec<u8> {
    let m = &seq.frames;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.push(seq.layer_tag);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<EmbeddingSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::malformed(path, "missing EMB1 magic"));
    }
    let layer_tag = bytes[4];
    if !(1..=4).contains(&layer_tag) {
        return Err(Error::malformed(path, format!("layer tag {layer_tag} outside 1..=4")));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if cols != EMBEDDING_DIM {
        return Err(Error::malformed(
            path,
            format!("embedding width {cols}, expected {EMBEDDING_DIM}"),
        ));
    }
    if rows == 0 {
        return Err(Error::malformed(path, "embedding sequence has no frames"));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * rows * cols {
        return Err(Error::malformed(
            path,
            format!("truncated: expected {} data bytes, found {}", 4 * rows * cols, body.len()),
        ));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::malformed(path, "non-finite embedding value"));
    }
    Ok(EmbeddingSequence {
        frames: Matrix::from_vec(rows, cols, data),
        layer_tag,
        source_id: source_id_for(path),
    })
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes, path)
}

pub fn write_embedding_file(path: impl AsRef<Path>, seq: &EmbeddingSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embedding(seq)).map_err(|e| Error::io(path, e))
}

/// Per-dimension mean over frames, accumulated in `f64`.
pub fn average_pool(seq: &EmbeddingSequence) -> Result<Vec<f32>> {
    let m = &seq.frames;
    if m.rows == 0 {
        return Err(Error::Empty(format!("embedding sequence {} has no frames", seq.source_id)));
    }
    let mut acc = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a += f64::from(v);
        }
    }
    let n = m.rows as f64;
    Ok(acc.into_iter().map(|s| (s / n) as f32).collect())
}
