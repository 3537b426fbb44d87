use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::job::Job;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "invlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub job: Job,
    /// Files written by the command, relative to the artifact directory.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(job: Job, mut artifacts: Vec<String>) -> Manifest {
        artifacts.sort();
        artifacts.dedup();
        Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            seed: job.seed(),
            job,
            artifacts,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(dir.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }

    /// Reads a manifest from a file or from `manifest.json` inside a directory.
    pub fn read(path: &Path) -> Result<Manifest> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", file.display()))?;
        if m.tool != TOOL {
            bail!("{} was not written by {TOOL}", file.display());
        }
        Ok(m)
    }
}
