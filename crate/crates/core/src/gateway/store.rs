//! Content-addressed artifact files.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::audio::{encode_wav, read_wav, AudioArtifact};

/// Artifacts stored as `<dir>/<sha256 of request key>.wav`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ArtifactStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn digest(key: &[u8]) -> String {
        hex::encode(Sha256::digest(key))
    }

    pub fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.wav"))
    }

    /// A readable artifact stored under `digest`, if any.
    pub fn load(&self, digest: &str) -> Option<AudioArtifact> {
        let path = self.path(digest);
        if !path.exists() {
            return None;
        }
        match read_wav(&path) {
            Ok(a) => Some(a),
            Err(e) => {
                tracing::warn!("ignoring unreadable cached artifact {}: {e}", path.display());
                None
            }
        }
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, digest: &str, artifact: &AudioArtifact) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path(digest);
        let tmp = self.dir.join(format!(".{digest}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, encode_wav(artifact))?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
