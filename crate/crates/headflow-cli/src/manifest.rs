//! Per-command run manifests: the resolved configuration, the subcommand
//! arguments, and a SHA-256 digest of every input file, written next to the
//! artifacts so any run can be reproduced byte for byte.

use std::path::Path;

use headflow::{report, Result};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    /// Space-joined subcommand path, e.g. "attribute heads".
    pub command: &'static str,
    pub config: &'a RunConfig,
    /// Subcommand-specific arguments (sorted keys).
    pub args: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Artifact file names relative to the output directory.
    pub outputs: Vec<String>,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'static str, config: &'a RunConfig) -> Self {
        Manifest {
            tool: "headflow",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            args: serde_json::Value::Object(serde_json::Map::new()),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with_args(mut self, args: serde_json::Value) -> Self {
        self.args = args;
        self
    }

    /// Records an input file along with its content digest.
    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, file_name: &str) {
        self.outputs.push(file_name.to_string());
    }

    /// Writes `<command-slug>.manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let slug = self.command.replace(' ', "-");
        report::write_json(dir.join(format!("{slug}.manifest.json")), self)
    }
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

/// Lowercase hex SHA-256 of an in-memory buffer.
pub fn sha256_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{b:02x}");
    }
    hex
}
