//! One module per CLI verb.

pub mod attribute;
pub mod evaluate;
pub mod gen;
pub mod lens;
pub mod oracle;
pub mod report;
pub mod synthetic;
pub mod tokens;

use std::path::Path;

use headflow::{Error, Result};

/// Reads a JSON artifact, tagging parse failures with the file name.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
