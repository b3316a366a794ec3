//! Binary tensor archive: `"ECOD"`, a version byte, a little-endian `u64`
//! manifest length, a UTF-8 JSON manifest and a little-endian `f64` payload.
//! Manifest offsets and counts are in elements, not bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ecoprune_core::denoiser::Denoiser;
use ecoprune_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"ECOD";
pub const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 8;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not an archive: {0}")]
    Format(String),
    #[error("archive does not describe a model: {0}")]
    Model(#[from] ecoprune_core::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<Entry>,
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            count: t.numel(),
        });
        offset += t.numel();
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries }).expect("manifest serialises");
    let mut out = Vec::with_capacity(HEADER + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out
}

/// Validates the whole buffer before building any tensor.
pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f64>>, ArchiveError> {
    let fmt = |m: String| ArchiveError::Format(m);
    if bytes.len() < HEADER {
        return Err(fmt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(fmt(format!("unsupported version {}", bytes[4])));
    }
    let len = u64::from_le_bytes(bytes[5..HEADER].try_into().expect("8 bytes"));
    let rest = (bytes.len() - HEADER) as u64;
    if len > rest {
        return Err(fmt(format!("manifest length {len} exceeds the {rest} remaining bytes")));
    }
    let len = len as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..HEADER + len])
        .map_err(|e| fmt(format!("manifest: {e}")))?;
    let payload = &bytes[HEADER + len..];
    let total: usize = manifest.tensors.iter().map(|e| e.count).sum();
    if payload.len() != total * 8 {
        return Err(fmt(format!(
            "payload has {} bytes, manifest needs {}",
            payload.len(),
            total * 8
        )));
    }
    let mut spans: Vec<(usize, usize)> = manifest.tensors.iter().map(|e| (e.offset, e.count)).collect();
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].0 + w[0].1 > w[1].0) {
        return Err(fmt("overlapping tensor ranges".into()));
    }
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        if e.shape.iter().product::<usize>() != e.count || e.offset + e.count > total {
            return Err(fmt(format!("tensor {} has an inconsistent shape or range", e.name)));
        }
        if out.contains_key(&e.name) {
            return Err(fmt(format!("duplicate tensor {}", e.name)));
        }
        let data: Vec<f64> = payload[e.offset * 8..(e.offset + e.count) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| fmt(format!("tensor {}: {err}", e.name)))?;
        out.insert(e.name.clone(), t);
    }
    Ok(out)
}

pub fn save<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>) -> Result<(), ArchiveError> {
    std::fs::write(path, encode(tensors)).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor<f64>>, ArchiveError> {
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

pub fn save_model(path: &Path, model: &Denoiser<f64>) -> Result<(), ArchiveError> {
    let named = model.named_tensors();
    save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// `seq_len` and `steps` are not stored in the weights and come from the
/// run configuration.
pub fn load_model(path: &Path, seq_len: usize, steps: usize) -> Result<Denoiser<f64>, ArchiveError> {
    Ok(Denoiser::from_named(load(path)?, seq_len, steps)?)
}
