//! Checkpoint files: one JSON header line followed by the raw weights.
//!
//! ```text
//! {"format":"mvdamage-checkpoint","version":1,"architecture":{..},"parameters":[..],"payload_bytes":N}\n
//! <N bytes: little-endian f32 values, parameters in table order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{ModelC, ModelCConfig};
use super::localization::{ModelL, ModelLConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const FORMAT: &str = "mvdamage-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Localization(ModelLConfig),
    Classification(ModelCConfig),
}

impl Architecture {
    /// Parameter table (names and shapes) this architecture instantiates.
    fn layout(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let store = match self {
            Architecture::Localization(c) => ModelL::new(c.clone(), 0)?.params,
            Architecture::Classification(c) => ModelC::new(c.clone(), 0)?.params,
        };
        Ok(store
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub parameters: Vec<ParamEntry>,
    pub payload_bytes: u64,
}

/// Serialises architecture and parameters to bytes.
pub fn encode_checkpoint(architecture: &Architecture, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let payload_bytes = (params.num_elements() * 4) as u64;
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        architecture: architecture.clone(),
        parameters: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
            })
            .collect(),
        payload_bytes,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(payload_bytes as usize);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Architecture, ParamStore<f32>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let payload = &bytes[nl + 1..];
    let table_elems: usize = header
        .parameters
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if header.payload_bytes != (table_elems * 4) as u64 {
        return Err(Error::Checkpoint(format!(
            "header declares {} payload bytes but the parameter table needs {}",
            header.payload_bytes,
            table_elems * 4
        )));
    }
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let layout = header.architecture.layout()?;
    let table: Vec<(String, Vec<usize>)> = header
        .parameters
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    if layout != table {
        return Err(Error::Checkpoint(
            "parameter table does not match the declared architecture".into(),
        ));
    }

    let mut store = ParamStore::new();
    let mut chunks = payload.chunks_exact(4);
    for entry in &header.parameters {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f32> = chunks
            .by_ref()
            .take(n)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let id = store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        store.by_id_mut(id).frozen = entry.frozen;
    }
    Ok((header.architecture, store))
}

pub fn save_checkpoint(
    path: &Path,
    architecture: &Architecture,
    params: &ParamStore<f32>,
) -> Result<()> {
    let bytes = encode_checkpoint(architecture, params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Architecture, ParamStore<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl ModelL {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &Architecture::Localization(self.config.clone()),
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_checkpoint(path)? {
            (Architecture::Localization(config), params) => Ok(Self { config, params }),
            (other, _) => Err(Error::Checkpoint(format!(
                "{} holds a {} model, expected localization",
                path.display(),
                kind(&other)
            ))),
        }
    }
}

impl ModelC {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &Architecture::Classification(self.config.clone()),
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_checkpoint(path)? {
            (Architecture::Classification(config), params) => Ok(Self { config, params }),
            (other, _) => Err(Error::Checkpoint(format!(
                "{} holds a {} model, expected classification",
                path.display(),
                kind(&other)
            ))),
        }
    }
}

fn kind(a: &Architecture) -> &'static str {
    match a {
        Architecture::Localization(_) => "localization",
        Architecture::Classification(_) => "classification",
    }
}
