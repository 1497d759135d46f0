//! Parameter checkpoints: an 8-byte little-endian header length, a UTF-8 JSON
//! header naming every parameter and its shape, then the values of all
//! parameters in header order as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::tensor::{ParamStore, Tensor};

pub const FORMAT_TAG: &str = "murke-params";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    /// Free-form model description (dimensions, vocabulary, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        dtype: "f32le".to_string(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
                frozen: p.frozen,
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * store.num_scalars());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Header)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format != FORMAT_TAG || header.dtype != "f32le" {
        return Err(bad("unrecognised checkpoint format"));
    }
    let mut floats = bytes[8 + hlen..].chunks_exact(4);
    let expected: usize = header.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
    if bytes.len() - 8 - hlen != 4 * expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {} bytes",
            bytes.len() - 8 - hlen
        )));
    }
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n = entry.shape[0] * entry.shape[1];
        let data = floats
            .by_ref()
            .take(n)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let id = store.add(
            entry.name.clone(),
            Tensor::new(entry.shape[0], entry.shape[1], data)?,
        );
        store.set_frozen(id, entry.frozen);
    }
    Ok((store, header))
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(store, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies values from `src` into `dst` by parameter name, checking shapes.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.param(id).name.clone();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let (shape, frozen) = (src.get(sid).shape(), src.is_frozen(sid));
        if dst.get(id).shape() != shape {
            return Err(Error::Shape {
                op: "restore",
                left: dst.get(id).shape(),
                right: shape,
            });
        }
        *dst.get_mut(id) = src.get(sid).clone();
        dst.set_frozen(id, frozen);
    }
    Ok(())
}
