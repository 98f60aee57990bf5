//! JSON report envelope and file helpers.
//!
//! Reports never carry timestamps or absolute output paths, so the same
//! inputs, config and seed give byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// Bumped whenever a report's layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'static str,
    pub provenance: Provenance,
    pub config: &'a PipelineConfig,
    pub result: T,
}

impl<'a, T: Serialize> Report<'a, T> {
    pub fn new(command: &'static str, config: &'a PipelineConfig, result: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command,
            provenance: Provenance {
                tool: "csvd",
                version: env!("CARGO_PKG_VERSION"),
                config_sha256: config.sha256(),
            },
            config,
            result,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes to `path`, or stdout when `path` is `None`.
    pub fn emit(&self, path: Option<&Path>) -> CliResult<()> {
        write_text(path, &self.to_json())
    }
}

pub fn write_text(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::input(format!("cannot write to stdout: {e}")))
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Base name of a path, for reports that should not depend on where the
/// caller keeps its files.
pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
