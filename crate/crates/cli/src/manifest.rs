//! One `manifest.json` per output directory: what ran, with which inputs and seeds.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bttf_core::params::sha256_hex;
use bttf_core::Error;
use serde::{Deserialize, Serialize};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
    pub checkpoints: Vec<FileDigest>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub version: String,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoints: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0.0,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) -> CliResult<()> {
        self.checkpoints.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.finished_unix = now_unix();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A list of videos with optional target classes, the input format of `evaluate`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoList {
    pub entries: Vec<VideoEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl VideoList {
    /// Loads a list; relative paths resolve against the list's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut list: VideoList = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut list.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(list)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
