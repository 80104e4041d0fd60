// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::TraceConfig;
use crate::error::{Result, UnpackError};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Package version plus the source revision when it was known at build time.
pub fn build_id() -> String {
    match option_env!("UNPACK_GIT_REVISION") {
        Some(rev) if !rev.is_empty() => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Everything needed to rerun a subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Command line after the program name.
    pub args: Vec<String>,
    pub configs: Vec<TraceConfig>,
    pub model_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Digest of the prompt fixtures, when they were used.
    pub fixtures: Option<String>,
    pub notes: Vec<String>,
    pub build: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, args: &[String]) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            args: args.to_vec(),
            configs: Vec::new(),
            model_path: None,
            seed: None,
            fixtures: None,
            notes: Vec::new(),
            build: build_id(),
            wall_time_secs: 0.0,
        }
    }

    pub fn write(&mut self, dir: &Path, started: Instant) -> Result<()> {
        self.wall_time_secs = started.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| UnpackError::InvalidArgument(format!("manifest: {e}")))?;
        std::fs::write(&path, text + "\n").map_err(|e| UnpackError::io(&path, e))
    }
}
