pub mod ablate;
pub mod bench;
pub mod collect;
pub mod eval;
pub mod plot;
pub mod train;

use std::path::{Path, PathBuf};

use crate::error::CliError;

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

/// `<dataset>.manifest.json`
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

pub fn latest_checkpoint(dir: &Path, mode: &str) -> PathBuf {
    dir.join(format!("{mode}-latest.idtc"))
}
