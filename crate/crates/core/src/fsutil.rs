//! Output directories are staged in a sibling temp directory and moved into
//! place once complete.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Marker file identifying directories this crate produced and may replace.
pub const MARKER: &str = ".hpnet-output";

pub fn write_dir_atomically<T>(out: &Path, fill: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir().map_err(|e| Error::io(out, e))?,
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    if out.exists() {
        let replaceable = out.is_dir()
            && (out.join(MARKER).exists()
                || fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none());
        if !replaceable {
            return Err(Error::invalid(format!(
                "refusing to replace {} (not an hpnet output directory)",
                out.display()
            )));
        }
    }
    let staging = tempfile::Builder::new()
        .prefix(".hpnet-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let value = fill(staging.path())?;
    fs::write(staging.path().join(MARKER), b"").map_err(|e| Error::io(staging.path(), e))?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, out).map_err(|e| Error::io(out, e))?;
    Ok(value)
}

/// Writes a single file through a temp file in the same directory.
pub fn write_file_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir().map_err(|e| Error::io(path, e))?,
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
