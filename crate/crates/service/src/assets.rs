//! Content-addressed PNG store. An asset id is the hex SHA-256 of its bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("no asset {0}")]
    NotFound(String),

    #[error("asset {0} failed its content check")]
    Corrupt(String),

    #[error("asset store: {0}")]
    Io(#[from] std::io::Error),
}

/// Hex SHA-256 of `bytes`.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_asset_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Assets live as `<id>.png` in one directory. Writes go to a temporary
/// file in the same directory and are renamed into place.
#[derive(Debug, Clone)]
pub struct AssetStore {
    dir: PathBuf,
}

impl AssetStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AssetError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.png"))
    }

    pub fn contains(&self, id: &str) -> bool {
        is_asset_id(id) && self.path(id).is_file()
    }

    /// Stores `bytes` and returns `(id, newly_created)`.
    pub fn put(&self, bytes: &[u8]) -> Result<(String, bool), AssetError> {
        let id = content_id(bytes);
        let path = self.path(&id);
        if path.is_file() && self.get(&id).is_ok() {
            return Ok((id, false));
        }
        let mut tmp = tempfile_in(&self.dir)?;
        tmp.1.write_all(bytes)?;
        tmp.1.sync_all()?;
        drop(tmp.1);
        fs::rename(&tmp.0, &path)?;
        Ok((id, true))
    }

    /// Reads an asset and checks its bytes against the id.
    pub fn get(&self, id: &str) -> Result<Vec<u8>, AssetError> {
        if !is_asset_id(id) {
            return Err(AssetError::NotFound(id.to_string()));
        }
        let bytes = match fs::read(self.path(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(AssetError::NotFound(id.to_string())),
            Err(e) => return Err(e.into()),
        };
        if content_id(&bytes) != id {
            return Err(AssetError::Corrupt(id.to_string()));
        }
        Ok(bytes)
    }

    /// Ids of every stored asset whose content verifies.
    pub fn verify_all(&self) -> Result<Vec<(String, bool)>, AssetError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".png").filter(|id| is_asset_id(id)) {
                out.push((id.to_string(), self.get(id).is_ok()));
            }
        }
        out.sort();
        Ok(out)
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    loop {
        let path = dir.join(format!(".upload-{:016x}.tmp", rand::random::<u64>()));
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}
