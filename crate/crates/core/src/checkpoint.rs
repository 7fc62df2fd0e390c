//! Checkpoints: a JSON manifest plus a sidecar of raw little-endian `f64`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::Learner;
use crate::numerics::{ParamStore, Tensor};
use crate::prompt::{PoolLayout, PromptPool};
use crate::vit::{ViTConfig, ViTModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the sidecar.
    pub offset: u64,
    /// Byte length in the sidecar.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub vit: ViTConfig,
    pub frozen: bool,
    pub pool: Option<PoolLayout>,
    /// Sidecar file name, relative to the manifest.
    pub binary: String,
    pub tensors: Vec<TensorEntry>,
}

/// Model and optional prompt pool with the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: ViTModel,
    pub pool: Option<PromptPool>,
}

/// `x.json` and `x.bin` for a stem `x` (a trailing `.json` is accepted).
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = if stem.extension().is_some_and(|e| e == "json") {
        stem.with_extension("")
    } else {
        stem.to_path_buf()
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut bin = base.into_os_string();
    bin.push(".bin");
    (json.into(), bin.into())
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn push_store(prefix: &str, store: &ParamStore, entries: &mut Vec<TensorEntry>, bin: &mut Vec<u8>) {
    for (name, t) in store.iter() {
        let offset = bin.len() as u64;
        for v in t.values() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
            offset,
            len: bin.len() as u64 - offset,
        });
    }
}

fn read_store(prefix: &str, entries: &[TensorEntry], bin: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries.iter().filter(|e| e.name.starts_with(prefix)) {
        let (start, len) = (e.offset as usize, e.len as usize);
        let n: usize = e.shape.iter().product();
        if len != n * 8 || start.checked_add(len).is_none_or(|end| end > bin.len()) {
            return Err(Error::Checkpoint(format!(
                "tensor {} claims bytes {start}..{} of a {}-byte sidecar for shape {:?}",
                e.name,
                start + len,
                bin.len(),
                e.shape
            )));
        }
        let values = bin[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| Error::Checkpoint(err.to_string()))?;
        store.add(&e.name[prefix.len()..], t);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn from_learner(config: &ExperimentConfig, learner: &Learner) -> Self {
        Self {
            config: config.clone(),
            model: learner.model.clone(),
            pool: learner.pool.clone(),
        }
    }

    pub fn into_learner(self) -> Result<Learner> {
        Learner::from_parts(&self.config, self.model, self.pool)
    }

    /// Manifest text and sidecar bytes.
    pub fn encode(&self, binary_name: &str) -> (String, Vec<u8>) {
        let mut entries = Vec::new();
        let mut bin = Vec::new();
        push_store("model/", self.model.store(), &mut entries, &mut bin);
        if let Some(pool) = &self.pool {
            push_store("pool/", pool.store(), &mut entries, &mut bin);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vit: self.model.config().clone(),
            frozen: self.model.is_frozen(),
            pool: self.pool.as_ref().map(PromptPool::layout),
            binary: binary_name.to_string(),
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        (text, bin)
    }

    pub fn decode(manifest: &str, bin: &[u8]) -> Result<Self> {
        let m: Manifest =
            serde_json::from_str(manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", m.format_version)));
        }
        let model = ViTModel::from_store(m.vit, read_store("model/", &m.tensors, bin)?, m.frozen)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let pool = match &m.pool {
            Some(layout) => Some(PromptPool::from_layout(layout, &read_store("pool/", &m.tensors, bin)?)?),
            None => None,
        };
        Ok(Self {
            config: m.config,
            model,
            pool,
        })
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (json, bin_path) = paths(stem);
        let name = bin_path.file_name().expect("file name").to_string_lossy().into_owned();
        let (text, bin) = self.encode(&name);
        write_atomic(&bin_path, &bin)?;
        write_atomic(&json, text.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, _) = paths(stem);
        let text = std::fs::read_to_string(&json)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", json.display())))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let bin_path = json.with_file_name(&m.binary);
        let bin = std::fs::read(&bin_path).map_err(|e| Error::Checkpoint(format!("{}: {e}", bin_path.display())))?;
        Self::decode(&text, &bin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn sample() -> Checkpoint {
        let config = ExperimentConfig::desk();
        let mut model = ViTModel::new(config.vit_config(20), &mut from_seed(3)).unwrap();
        model.freeze();
        let mut pool = PromptPool::for_model(model.config(), 20, 5).unwrap();
        pool.expand_for_task(0, &mut from_seed(4)).unwrap();
        pool.expand_for_task(1, &mut from_seed(5)).unwrap();
        Checkpoint {
            config,
            model,
            pool: Some(pool),
        }
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let c = sample();
        let (text, bin) = c.encode("x.bin");
        let back = Checkpoint::decode(&text, &bin).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode("x.bin"), (text, bin));
    }

    #[test]
    fn corrupt_sidecar_is_a_checkpoint_error() {
        let (text, bin) = sample().encode("x.bin");
        assert!(matches!(Checkpoint::decode(&text, &bin[..bin.len() - 8]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::decode("{}", &bin), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn stem_paths() {
        let (j, b) = paths(Path::new("out/task_1"));
        assert_eq!(j, PathBuf::from("out/task_1.json"));
        assert_eq!(b, PathBuf::from("out/task_1.bin"));
        assert_eq!(paths(Path::new("out/task_1.json")).0, j);
    }
}
