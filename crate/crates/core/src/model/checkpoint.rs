//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json        {"format", "version", "model_config", "vocabulary",
//!                       "momentum_alpha", "tensors": [{name, group, shape, file}]}
//! tensors/NNNNN.bin    raw little-endian float64, row-major, no header
//! ```
//!
//! `group` is `"live"` or `"momentum"`. Tensor files hold exactly
//! `product(shape) * 8` bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MomentumState, ParamStore, Params};
use crate::numerics::Tensor;
use crate::textproc::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "laip-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model_config: ModelConfig,
    vocabulary: Option<Vec<String>>,
    momentum_alpha: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub momentum: Option<MomentumState>,
    pub vocabulary: Option<Vocabulary>,
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::format(
            bytes.len().min(n * 8) as u64,
            format!("{}: expected {} bytes, found {}", path.display(), n * 8, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("tensors"))?;
        let mut entries = Vec::new();
        let mut write = |name: &str, group: &str, t: &Tensor| -> Result<()> {
            let file = format!("tensors/{:05}.bin", entries.len());
            write_blob(&dir.join(&file), t)?;
            entries.push(TensorEntry {
                name: name.to_string(),
                group: group.to_string(),
                shape: t.shape().to_vec(),
                file,
            });
            Ok(())
        };
        for (_, name, t) in self.params.store.iter() {
            write(name, "live", t)?;
        }
        if let Some(m) = &self.momentum {
            for (id, t) in m.iter() {
                write(self.params.store.name(id), "momentum", t)?;
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model_config: self.params.config.clone(),
            vocabulary: self
                .vocabulary
                .as_ref()
                .map(|v| (0..v.len()).map(|i| v.token(i).to_string()).collect()),
            momentum_alpha: self.momentum.as_ref().map(|m| m.alpha),
            tensors: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::format(0, format!("not a checkpoint manifest: {:?}", manifest.format)));
        }
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                0,
                format!("checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})", manifest.version),
            ));
        }
        let mut store = ParamStore::default();
        let mut shadow_named = Vec::new();
        for e in &manifest.tensors {
            let t = read_blob(&dir.join(&e.file), &e.shape)?;
            match e.group.as_str() {
                "live" => {
                    store.add(e.name.clone(), t);
                }
                "momentum" => shadow_named.push((e.name.clone(), t)),
                other => return Err(Error::format(0, format!("unknown tensor group {other:?}"))),
            }
        }
        let params = Params::with_store(&manifest.model_config, store)?;
        let momentum = match manifest.momentum_alpha {
            Some(alpha) => {
                let mut shadow = BTreeMap::new();
                for (name, t) in shadow_named {
                    let id = params
                        .store
                        .id(&name)
                        .ok_or_else(|| Error::format(0, format!("momentum tensor {name} has no live tensor")))?;
                    shadow.insert(id, t);
                }
                Some(MomentumState::from_parts(alpha, shadow))
            }
            None => None,
        };
        let vocabulary = manifest.vocabulary.map(Vocabulary::from_token_list);
        Ok(Self {
            params,
            momentum,
            vocabulary,
        })
    }
}
