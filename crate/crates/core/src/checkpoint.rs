//! Versioned checkpoint archive: named parameter arrays in a safetensors
//! container with JSON metadata and a content hash.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::NetSpec;
use crate::schema::LabelSchema;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "maskface";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Parser,
    Gan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub spec: NetSpec,
    pub schema: LabelSchema,
    pub step: u64,
    /// Training configuration the state was produced with, as TOML.
    pub config: Option<String>,
    pub content_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn content_hash(tensors: &BTreeMap<String, Tensor>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        h.update(View::data(t));
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, spec: &NetSpec, schema: &LabelSchema, step: u64) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind,
                spec: spec.clone(),
                schema: schema.clone(),
                step,
                config: None,
                content_hash: String::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every tensor of `group` under `"{prefix}/{name}"`.
    pub fn insert_group(&mut self, prefix: &str, group: BTreeMap<String, Tensor>) {
        for (name, t) in group {
            self.tensors.insert(format!("{prefix}/{name}"), t);
        }
    }

    /// Tensors stored under `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Short identifier derived from the content hash.
    pub fn id(&self) -> String {
        let hash = if self.meta.content_hash.is_empty() {
            content_hash(&self.tensors)
        } else {
            self.meta.content_hash.clone()
        };
        hash[..16].to_string()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.content_hash = content_hash(&self.tensors);
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).expect("metadata serializes"))]);
        safetensors::serialize(self.tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("unreadable archive: {e}")))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                meta.format_version
            )));
        }
        meta.spec.validate().map_err(|e| Error::Checkpoint(format!("bad net spec: {e}")))?;
        drop(st);
        let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("tensor data: {e}")))?
            .into_iter()
            .collect();
        let actual = content_hash(&tensors);
        if actual != meta.content_hash {
            return Err(Error::Checkpoint("content hash mismatch, checkpoint is corrupt".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn sample() -> Checkpoint {
        let schema = LabelSchema::toy();
        let mut c = Checkpoint::new(CheckpointKind::Gan, &NetSpec::toy(schema.len()), &schema, 42);
        let dev = Device::Cpu;
        c.insert_group(
            "g",
            BTreeMap::from([
                ("a.weight".to_string(), Tensor::arange(0f32, 6.0, &dev).unwrap().reshape((2, 3)).unwrap()),
                ("b".to_string(), Tensor::ones(4, DType::F64, &dev).unwrap()),
            ]),
        );
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta.step, 42);
        assert_eq!(back.meta.spec, c.meta.spec);
        let g = back.group("g");
        assert_eq!(g["a.weight"].to_vec2::<f32>().unwrap(), vec![vec![0., 1., 2.], vec![3., 4., 5.]]);
        assert_eq!(back.id(), c.id());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b""), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().tensors.len(), 2);
    }
}
