//! Single-file parameter checkpoints ("NTA-v1").
//!
//! Layout: the magic `NTAC`, a little-endian u64 manifest length, the UTF-8
//! JSON manifest, then every entry's little-endian payload back to back in
//! manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{FlatConfig, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, Group, NdArray, ParamStore, Scalar};

pub const MAGIC: &[u8; 4] = b"NTAC";
pub const FORMAT: &str = "NTA-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub group: Group,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub config: FlatConfig,
    pub iteration: usize,
    pub val_miou: Option<f64>,
    pub entries: BTreeMap<String, EntryInfo>,
}

impl Manifest {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_flat(&self.config)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: &RunConfig, iteration: usize, val_miou: Option<f64>, params: ParamStore<T>) -> Self {
        let mut offset = 0u64;
        let mut entries = BTreeMap::new();
        for (name, e) in params.iter() {
            let length = (e.value.len() * T::DTYPE.size_of()) as u64;
            entries.insert(
                name.clone(),
                EntryInfo {
                    dtype: T::DTYPE,
                    shape: e.value.shape().to_vec(),
                    offset,
                    length,
                    group: e.group,
                    trainable: e.trainable,
                },
            );
            offset += length;
        }
        Checkpoint {
            manifest: Manifest {
                format: FORMAT.into(),
                config_hash: config.hash(),
                config: config.to_flat(),
                iteration,
                val_miou,
                entries,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + manifest.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, e) in self.params.iter() {
            for &v in e.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fmt("missing NTAC magic"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = 12usize
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fmt("manifest length exceeds file size"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[12..body])?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unsupported format `{}`", manifest.format)));
        }
        let payload = &bytes[body..];
        let mut expected = 0u64;
        let mut params = ParamStore::new();
        for (name, info) in &manifest.entries {
            if info.offset != expected {
                return Err(Error::Format(format!("entry `{name}` is not contiguous")));
            }
            let n: usize = info.shape.iter().product();
            let size = info.dtype.size_of();
            if info.length != (n * size) as u64 {
                return Err(Error::Format(format!("entry `{name}` length disagrees with its shape")));
            }
            let start = info.offset as usize;
            let raw = payload
                .get(start..start + info.length as usize)
                .ok_or_else(|| Error::Format(format!("entry `{name}` runs past the end of the file")))?;
            let data: Vec<T> = match info.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
            };
            params.insert_entry(name.clone(), NdArray::from_vec(info.shape.clone(), data)?, info.group, info.trainable)?;
            expected += info.length;
        }
        if expected != payload.len() as u64 {
            return Err(fmt("trailing bytes after the last entry"));
        }
        Ok(Checkpoint { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
