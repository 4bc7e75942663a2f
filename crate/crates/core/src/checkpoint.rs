//! Versioned binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "BARCKPT1"
//! version    u32 LE
//! header_len u64 LE
//! header     canonical JSON (sorted keys, no whitespace):
//!            {config, history, manifest: [{frozen, name, offset, shape}], slots}
//! payload    little-endian f32 values, tensors in manifest order
//! ```
//!
//! Values live in memory as `f64`; the `f64 -> f32 -> f64` round trip is exact
//! to within 1e-6 absolute for the parameter magnitudes used here.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MoeModelConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BARCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// One completed pipeline action recorded in a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub domain: String,
    pub steps: u64,
    pub tokens: u64,
    pub seed: u64,
}

impl StageRecord {
    pub fn new(stage: impl Into<String>, domain: impl Into<String>, steps: u64, tokens: u64, seed: u64) -> Self {
        Self {
            stage: stage.into(),
            domain: domain.into(),
            steps,
            tokens,
            seed,
        }
    }
}

/// A model together with the bookkeeping that travels with it on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: MoeModelConfig,
    pub params: ParamStore,
    pub history: Vec<StageRecord>,
    /// Label of every expert slot, in slot order (`"anchor"` for the anchor).
    pub slots: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MoeModelConfig,
    history: Vec<StageRecord>,
    manifest: Vec<ManifestEntry>,
    slots: Vec<String>,
}

impl Checkpoint {
    /// Empty `slots` labels every slot `expert{i}`.
    pub fn new(config: MoeModelConfig, params: ParamStore, slots: Vec<String>) -> Self {
        let slots = if slots.is_empty() {
            (0..config.n_experts).map(|i| format!("expert{i}")).collect()
        } else {
            slots
        };
        Self {
            config,
            params,
            history: Vec::new(),
            slots,
        }
    }

    pub fn slot_of(&self, domain: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == domain)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, p) in self.params.iter() {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
                frozen: p.frozen,
            });
            offset += 4 * p.tensor.len() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            history: self.history.clone(),
            manifest,
            slots: self.slots.clone(),
        };
        // Round-tripping through `Value` sorts object keys.
        let value = serde_json::to_value(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header_bytes = serde_json::to_vec(&value).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut out = Vec::with_capacity(20 + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, p) in self.params.iter() {
            for &v in p.tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated("preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CheckpointError::Truncated("header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
        if header.slots.len() != header.config.n_experts {
            return Err(CheckpointError::Inconsistent(format!(
                "{} slot labels for {} experts",
                header.slots.len(),
                header.config.n_experts
            )));
        }

        let expected = header.config.param_shapes();
        if expected.len() != header.manifest.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "manifest lists {} tensors, config expects {}",
                header.manifest.len(),
                expected.len()
            )));
        }
        let payload = &bytes[payload_start..];
        let mut params = ParamStore::new();
        let mut cursor = 0u64;
        for (entry, (exp_name, exp_shape)) in header.manifest.iter().zip(&expected) {
            if &entry.name != exp_name {
                return Err(CheckpointError::Inconsistent(format!(
                    "manifest entry {} where config expects {exp_name}",
                    entry.name
                )));
            }
            if &entry.shape != exp_shape {
                return Err(CheckpointError::ShapeConflict {
                    name: entry.name.clone(),
                    manifest: entry.shape.clone(),
                    expected: exp_shape.clone(),
                });
            }
            if entry.offset < cursor {
                return Err(CheckpointError::Overlap(entry.name.clone()));
            }
            if entry.offset > cursor {
                return Err(CheckpointError::Gap(entry.name.clone()));
            }
            let n: usize = entry.shape.iter().product();
            let end = cursor as usize + 4 * n;
            if end > payload.len() {
                return Err(CheckpointError::Truncated(format!("payload of {}", entry.name)));
            }
            let data: Vec<f64> = payload[cursor as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let tensor = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
            params.insert_param(
                entry.name.clone(),
                Param {
                    tensor,
                    frozen: entry.frozen,
                },
            );
            cursor = end as u64;
        }
        if cursor as usize != payload.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{} trailing payload bytes",
                payload.len() - cursor as usize
            )));
        }
        Ok(Self {
            config: header.config,
            params,
            history: header.history,
            slots: header.slots,
        })
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(CheckpointError::Io)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Rounds every value through `f32`, matching what a save/load cycle yields.
    pub fn quantize_in_place(&mut self) {
        for (_, p) in self.params.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Loads a checkpoint or explains which subcommand produces it.
pub fn load_required(path: &Path, hint: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            hint: hint.to_string(),
        });
    }
    Checkpoint::load(path)
}
