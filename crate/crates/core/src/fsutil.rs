use std::io::Write;
use std::path::Path;

use crate::error::{Result, SurtError};

/// Write `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| SurtError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| SurtError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| SurtError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| SurtError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SurtError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| SurtError::io(path, e))
}

/// Serialize each item as one JSON line and write the file atomically.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}
