//! `.bkpt` layout, little-endian: magic `"BKPT"`, `u8` version, `u32` header
//! length, UTF-8 `key=value` header lines, then every tensor as `f32` in node
//! order (trainable parameters, then batch-norm running statistics).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeedTree;

use super::{Architecture, ModelGraph};

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"BKPT";

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
    pub val_uar: Option<f64>,
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub model: ModelGraph<f32>,
    pub meta: CheckpointMeta,
}

/// One token per node: kind plus the shapes of every stored tensor.
fn layout(model: &ModelGraph<f32>) -> String {
    model
        .nodes
        .iter()
        .map(|n| {
            let shapes: Vec<String> = n
                .params
                .iter()
                .chain(&n.state)
                .map(|t| t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x"))
                .collect();
            if shapes.is_empty() {
                n.spec.kind().to_string()
            } else {
                format!("{}:{}", n.spec.kind(), shapes.join(","))
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn encode_checkpoint(model: &ModelGraph<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let arch: Architecture = model.name.parse()?;
    let floats: usize = model.all_tensors().map(|t| t.len()).sum();
    let mut header = String::new();
    writeln!(header, "architecture={arch}").unwrap();
    writeln!(header, "layout={}", layout(model)).unwrap();
    writeln!(header, "floats={floats}").unwrap();
    if let Some(e) = meta.epoch {
        writeln!(header, "epoch={e}").unwrap();
    }
    if let Some(s) = meta.seed {
        writeln!(header, "seed={s}").unwrap();
    }
    if let Some(u) = meta.val_uar {
        writeln!(header, "val_uar={u}").unwrap();
    }
    for (k, v) in &meta.extra {
        if k.contains(['=', '\n']) || v.contains('\n') || RESERVED.contains(&k.as_str()) {
            return Err(Error::InvalidArgument(format!("checkpoint metadata key {k:?} not allowed")));
        }
        writeln!(header, "{k}={v}").unwrap();
    }
    let mut out = Vec::with_capacity(9 + header.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in model.all_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

const RESERVED: [&str; 6] = ["architecture", "layout", "floats", "epoch", "seed", "val_uar"];

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::malformed(path, reason);
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("missing BKPT magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: bytes[4],
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = bytes
        .get(9..9 + header_len)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut fields = BTreeMap::new();
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("header line without '=': {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let mut take = |k: &str| fields.remove(k);
    let architecture: Architecture = take("architecture")
        .ok_or_else(|| bad("header lacks architecture".into()))?
        .parse()
        .map_err(|e: Error| bad(e.to_string()))?;
    let mut model: ModelGraph<f32> = architecture.build(&SeedTree::new(0))?;
    let expected_layout = layout(&model);
    if take("layout").as_deref() != Some(expected_layout.as_str()) {
        return Err(bad(format!("tensor layout does not match {architecture}")));
    }
    let floats: usize = model.all_tensors().map(|t| t.len()).sum();
    if take("floats").and_then(|f| f.parse().ok()) != Some(floats) {
        return Err(bad(format!("float count does not match {architecture} ({floats})")));
    }
    let epoch = take("epoch")
        .map(|v| v.parse().map_err(|_| bad(format!("bad epoch {v:?}"))))
        .transpose()?;
    let seed = take("seed")
        .map(|v| v.parse().map_err(|_| bad(format!("bad seed {v:?}"))))
        .transpose()?;
    let val_uar = take("val_uar")
        .map(|v| v.parse().map_err(|_| bad(format!("bad val_uar {v:?}"))))
        .transpose()?;
    let blob = &bytes[9 + header_len..];
    if blob.len() != 4 * floats {
        return Err(bad(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            4 * floats
        )));
    }
    let mut values = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in model.all_tensors_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
            if !v.is_finite() {
                return Err(bad("non-finite parameter".into()));
            }
        }
    }
    Ok(Checkpoint {
        architecture,
        model,
        meta: CheckpointMeta {
            epoch,
            seed,
            val_uar,
            extra: fields,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelGraph<f32>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
