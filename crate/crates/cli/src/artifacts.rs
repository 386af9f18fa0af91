//! Artifact files. JSON artifacts carry a top-level `config_hash`; line
//! files start with a `{"config_hash": ...}` header line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Fails with a config error naming `path` when it does not exist.
pub fn require_input(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

/// Path of an upstream artifact, or a config error naming the producer.
pub fn require_artifact(dir: &Path, name: &str, producer: &str) -> Result<PathBuf, CliError> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Config(format!(
            "missing artifact {}; run `vidpeak {producer}` with the same config first",
            p.display()
        )))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a JSON artifact and checks its `config_hash`.
pub fn read_json<T: DeserializeOwned>(path: &Path, hash: &str) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))?;
    let found = value.get("config_hash").and_then(|v| v.as_str()).unwrap_or("<none>");
    if found != hash {
        return Err(CliError::Data(format!(
            "{} has config hash {found}, expected {hash}; refusing to merge",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| io_err(path, e))
}

/// Writes a header line, then whatever `body` writes.
pub fn write_lines(
    path: &Path,
    hash: &str,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&Header {
        config_hash: hash.to_string(),
    })?;
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    body(&mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a line file written by [`write_lines`], checking the header, and
/// returns the remaining bytes.
pub fn read_lines(path: &Path, hash: &str) -> Result<Vec<u8>, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let header: Header = serde_json::from_slice(&bytes[..end])
        .map_err(|e| CliError::Data(format!("{}: missing artifact header ({e})", path.display())))?;
    if header.config_hash != hash {
        return Err(CliError::Data(format!(
            "{} has config hash {}, expected {hash}",
            path.display(),
            header.config_hash
        )));
    }
    Ok(bytes[(end + 1).min(bytes.len())..].to_vec())
}

/// Reads an input line file that may or may not carry an artifact header.
pub fn read_input_lines(path: &Path) -> Result<Vec<u8>, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let is_header = serde_json::from_slice::<serde_json::Value>(&bytes[..end])
        .ok()
        .and_then(|v| v.as_object().map(|o| o.len() == 1 && o.contains_key("config_hash")))
        .unwrap_or(false);
    Ok(if is_header { bytes[(end + 1).min(bytes.len())..].to_vec() } else { bytes })
}

/// Writes serializable rows as CSV.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
