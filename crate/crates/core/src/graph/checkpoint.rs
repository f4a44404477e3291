//! Checkpoint layout: `"UPDP1"`, a little-endian `u64` manifest length, the
//! JSON manifest, then the raw little-endian parameter payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use updp_tensor::{DType, Element, ParamStore, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"UPDP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
    pub trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest<G> {
    graph: G,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<G, T> {
    pub graph: G,
    pub params: ParamStore<T>,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<G: Serialize, T: Element>(graph: &G, params: &ParamStore<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, leaf) in params.iter() {
        let offset = payload.len() as u64;
        for &v in leaf.value.data() {
            v.write_le(&mut payload);
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: leaf.value.shape().to_vec(),
            dtype: T::DTYPE.name().to_string(),
            offset,
            len: payload.len() as u64 - offset,
            trainable: leaf.trainable,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        graph,
        meta: meta.clone(),
        params: entries,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode<T: Element, S: Element>(bytes: &[u8]) -> Vec<T> {
    let size = S::DTYPE.size_of();
    bytes.chunks_exact(size).map(|c| T::from_f64(S::read_le(c).as_f64())).collect()
}

pub fn load_checkpoint<G: DeserializeOwned, T: Element>(bytes: &[u8]) -> Result<Checkpoint<G, T>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing UPDP1 header"));
    }
    let len_bytes: [u8; 8] = bytes[5..13].try_into().expect("8 bytes");
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let body = &bytes[13..];
    if body.len() < mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest<G> = serde_json::from_slice(&body[..mlen])?;
    let payload = &body[mlen..];
    let mut params = ParamStore::new();
    for e in manifest.params {
        let dtype = DType::parse(&e.dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype `{}`", e.dtype)))?;
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("parameter `{}` runs past the payload", e.name)));
        }
        let raw = &payload[start..end];
        if raw.len() % dtype.size_of() != 0 {
            return Err(Error::Checkpoint(format!("parameter `{}` has a partial element", e.name)));
        }
        let data: Vec<T> = match dtype {
            DType::F32 => decode::<T, f32>(raw),
            DType::F64 => decode::<T, f64>(raw),
        };
        params.insert(e.name, Tensor::new(e.shape, data)?, e.trainable);
    }
    Ok(Checkpoint {
        graph: manifest.graph,
        params,
        meta: manifest.meta,
    })
}

pub fn write_checkpoint<G: Serialize, T: Element>(
    path: impl AsRef<Path>,
    graph: &G,
    params: &ParamStore<T>,
    meta: &serde_json::Value,
) -> Result<()> {
    let bytes = save_checkpoint(graph, params, meta)?;
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint<G: DeserializeOwned, T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<G, T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    load_checkpoint(&bytes)
}
