//! Model checkpoints: `FINDECK1`, a little-endian `u64` header length, a
//! JSON header, then every parameter as little-endian `f64` in declaration
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FINDECK1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    k: usize,
    params: Vec<ParamInfo>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, model: &Model, metadata: serde_json::Value) -> Result<()> {
    let header = Header {
        spec: model.spec.clone(),
        k: model.bank.k(),
        params: (0..model.params.len())
            .map(|i| ParamInfo {
                name: model.params.name(i).to_string(),
                shape: model.params.get(i).shape().to_vec(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let flat = model.params.flatten();
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * flat.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Rebuilds the model from its spec and overwrites the parameters.
pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let bytes = fs::read(path).map_err(|e| bad(&e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let blob = &bytes[16 + len..];
    if blob.len() % 8 != 0 {
        return Err(bad("parameter blob is not a whole number of f64"));
    }
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = Model::new(header.spec)?;
    if model.params.len() != header.params.len()
        || header
            .params
            .iter()
            .enumerate()
            .any(|(i, p)| p.name != model.params.name(i) || p.shape != model.params.get(i).shape())
    {
        return Err(bad("parameter layout does not match the model spec"));
    }
    model.params.load_flat(&flat)?;
    Ok((model, header.metadata))
}
