use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "proto-lab run manifest v1";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one command invocation. `config` holds the fully resolved
/// arguments, enough to re-run the command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub threads: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            command: command.to_string(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        }
    }

    /// Records `paths` (absolute or relative to `dir`) as outputs.
    pub fn add_outputs<P: AsRef<Path>>(&mut self, dir: &Path, paths: impl IntoIterator<Item = P>) {
        for p in paths {
            let p = p.as_ref();
            let rel = p.strip_prefix(dir).unwrap_or(p);
            self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }

    /// Stamps the end time and writes the manifest into `dir`, listing
    /// itself among the outputs.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        self.outputs.push(RUN_MANIFEST_FILE.to_string());
        self.outputs.sort();
        self.outputs.dedup();
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::format("run manifest", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format("run manifest", e))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format(
                "run manifest",
                format!("unsupported format {:?}", m.format),
            ));
        }
        Ok(m)
    }
}
