//! Shared service state: the model snapshot slot, sessions and reference
//! resolution.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use maskface_core::io::{decode_image_png, decode_mask_png};
use maskface_core::pipeline::EmbeddingCache;
use maskface_core::training::ParserModel;
use maskface_core::{Checkpoint, CheckpointKind, Dataset, Error, Generator, LabelMask, LabelSchema, Sample, SampleStore};

use crate::assets::{AssetError, AssetStore};

/// A generator and the id of the checkpoint it came from.
#[derive(Debug)]
pub struct LoadedGenerator {
    pub checkpoint_id: String,
    pub generator: Generator,
}

#[derive(Debug)]
pub struct LoadedParser {
    pub checkpoint_id: String,
    pub parser: ParserModel,
}

/// Immutable view of the loaded weights. Handlers clone the `Arc` and never
/// mutate it; loading new weights builds a fresh snapshot.
#[derive(Debug, Default)]
pub struct ModelSnapshot {
    pub version: u64,
    pub generator: Option<Arc<LoadedGenerator>>,
    pub parser: Option<Arc<LoadedParser>>,
}

impl ModelSnapshot {
    pub fn checkpoint_id(&self) -> Option<&str> {
        self.generator.as_ref().map(|g| g.checkpoint_id.as_str())
    }

    pub fn parser_id(&self) -> Option<&str> {
        self.parser.as_ref().map(|p| p.checkpoint_id.as_str())
    }
}

/// Versioned pointer to the current snapshot. Swaps are atomic: a request
/// sees either the old or the new snapshot in full.
#[derive(Debug, Default)]
pub struct ModelSlot {
    current: RwLock<Arc<ModelSnapshot>>,
    versions: AtomicU64,
}

impl ModelSlot {
    pub fn current(&self) -> Arc<ModelSnapshot> {
        self.current.read().expect("model slot poisoned").clone()
    }

    /// Installs new weights. `None` keeps that part of the current snapshot.
    pub fn swap(&self, generator: Option<LoadedGenerator>, parser: Option<LoadedParser>) -> Arc<ModelSnapshot> {
        let mut guard = self.current.write().expect("model slot poisoned");
        let next = Arc::new(ModelSnapshot {
            version: self.versions.fetch_add(1, Ordering::SeqCst) + 1,
            generator: generator.map(Arc::new).or_else(|| guard.generator.clone()),
            parser: parser.map(Arc::new).or_else(|| guard.parser.clone()),
        });
        *guard = next.clone();
        next
    }
}

/// Loads a GAN checkpoint for serving, checking it against `schema`.
pub fn load_generator(path: &Path, schema: &LabelSchema) -> maskface_core::Result<LoadedGenerator> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.kind != CheckpointKind::Gan {
        return Err(Error::Checkpoint(format!("{}: not a GAN checkpoint", path.display())));
    }
    if &ckpt.meta.schema != schema {
        return Err(Error::Checkpoint(format!("{}: trained on a different label schema", path.display())));
    }
    Ok(LoadedGenerator {
        checkpoint_id: ckpt.id(),
        generator: Generator::from_checkpoint(&ckpt)?,
    })
}

pub fn load_parser(path: &Path, schema: &LabelSchema) -> maskface_core::Result<LoadedParser> {
    let ckpt = Checkpoint::load(path)?;
    if &ckpt.meta.schema != schema {
        return Err(Error::Checkpoint(format!("{}: trained on a different label schema", path.display())));
    }
    Ok(LoadedParser {
        checkpoint_id: ckpt.id(),
        parser: ParserModel::from_checkpoint(&ckpt, true)?,
    })
}

/// Per-client editing state.
#[derive(Debug, Default)]
pub struct Session {
    pub id: String,
    /// Checkpoint the cached embeddings were computed with.
    pub checkpoint_id: Option<String>,
    pub cache: EmbeddingCache,
    pub last_target_mask: Option<(String, LabelMask)>,
}

#[derive(Debug, Default)]
pub struct Sessions {
    map: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl Sessions {
    pub fn create(&self) -> Arc<Mutex<Session>> {
        let mut map = self.map.lock().expect("sessions poisoned");
        loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if let std::collections::hash_map::Entry::Vacant(slot) = map.entry(id.clone()) {
                let s = Arc::new(Mutex::new(Session {
                    id,
                    ..Session::default()
                }));
                slot.insert(s.clone());
                return s;
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.map.lock().expect("sessions poisoned").get(id).cloned()
    }

    pub fn remove(&self, id: &str) -> bool {
        self.map.lock().expect("sessions poisoned").remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("sessions poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything the handlers share.
#[derive(Debug)]
pub struct AppState {
    pub schema: LabelSchema,
    pub resolution: usize,
    pub assets: AssetStore,
    pub dataset: Option<Dataset>,
    pub model: ModelSlot,
    pub sessions: Sessions,
    pub max_upload_bytes: usize,
}

/// Resolves edit references against the dataset and the asset store.
///
/// A sample reference is a dataset id or `<image asset>:<mask asset>`; a
/// mask reference is a dataset id, a mask asset id, or a sample reference
/// whose mask is used.
pub struct RefResolver<'a> {
    pub state: &'a AppState,
}

impl RefResolver<'_> {
    fn asset(&self, id: &str) -> maskface_core::Result<Vec<u8>> {
        self.state.assets.get(id).map_err(|e| match e {
            AssetError::NotFound(id) => Error::Lookup(id),
            other => Error::Numeric(other.to_string()),
        })
    }

    fn decode_mask(&self, id: &str) -> maskface_core::Result<LabelMask> {
        decode_mask_png(&self.asset(id)?, &self.state.schema).map_err(|e| match e {
            Error::Decode(m) => Error::Schema(format!("mask asset {id}: {m}")),
            other => other,
        })
    }
}

impl SampleStore for RefResolver<'_> {
    fn sample(&self, id: &str) -> maskface_core::Result<Sample> {
        if let Some(s) = self.state.dataset.as_ref().and_then(|d| d.get(id)) {
            return Ok(s.clone());
        }
        let (image_id, mask_id) = id.split_once(':').ok_or_else(|| Error::Lookup(id.to_string()))?;
        let image = decode_image_png(&self.asset(image_id)?).map_err(|e| match e {
            Error::Decode(m) => Error::Shape(format!("image asset {image_id}: {m}")),
            other => other,
        })?;
        let mask = self.decode_mask(mask_id)?;
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(Error::Shape(format!("{id}: image and mask sizes differ")));
        }
        Ok(Sample {
            id: id.to_string(),
            image,
            mask,
        })
    }

    fn mask(&self, id: &str) -> maskface_core::Result<LabelMask> {
        if let Some(s) = self.state.dataset.as_ref().and_then(|d| d.get(id)) {
            return Ok(s.mask.clone());
        }
        match id.split_once(':') {
            Some((_, mask_id)) => self.decode_mask(mask_id),
            None => self.decode_mask(id),
        }
    }
}
