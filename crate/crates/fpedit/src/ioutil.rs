//! Small filesystem helpers shared by checkpoint, registry, and report
//! writers.

use crate::error::Result;
use std::io::Write;
use std::path::Path;

/// Write a file atomically: write to a sibling temp file, fsync, rename.
/// A crashed or concurrent writer can never leave a half-written file at
/// the destination, and because all our artifact bytes are deterministic,
/// two concurrent writers racing on the rename still converge.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp.{}", std::process::id()));
    let tmp_path = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp_path)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}
