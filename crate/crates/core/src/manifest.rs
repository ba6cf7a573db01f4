//! Content hashes of stage artifacts, so a stage can refuse inputs that
//! changed after the stage that produced them ran.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub stage: String,
    pub sha256: String,
}

/// Map from artifact path (relative to the manifest directory) to its hash.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, Entry>,
    #[serde(skip)]
    root: PathBuf,
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of every file under `path` (or of `path` itself), in sorted order.
pub fn tree_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return file_hash(path);
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(tree_hash(&p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

impl Manifest {
    /// Read `dir/manifest.json`, or start an empty one.
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let mut m: Manifest = if p.exists() { serde_json::from_reader(std::fs::File::open(&p)?)? } else { Manifest::default() };
        m.root = dir.to_path_buf();
        Ok(m)
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn record(&mut self, stage: &str, path: &Path) -> Result<()> {
        let sha256 = tree_hash(path)?;
        self.files.insert(self.key(path), Entry { stage: stage.to_string(), sha256 });
        Ok(())
    }

    /// Fails when `path` was recorded by an earlier stage and has changed
    /// since. Unrecorded paths (user-supplied inputs) pass.
    pub fn check(&self, path: &Path) -> Result<()> {
        let Some(e) = self.files.get(&self.key(path)) else {
            return Ok(());
        };
        let now = tree_hash(path)?;
        if now != e.sha256 {
            return Err(Error::Data(format!(
                "{} changed since stage '{}' wrote it; rerun that stage",
                path.display(),
                e.stage
            )));
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.root.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
