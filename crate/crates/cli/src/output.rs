use std::fs;
use std::path::{Path, PathBuf};

use flor_core::volume::raw_sidecar_path;
use tempfile::TempDir;

use crate::CliError;

/// Outputs are written into a scratch directory next to their destination and
/// renamed into place only by [`Staged::commit`].
pub struct Staged {
    dir: TempDir,
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn new(destination: &Path) -> Result<Self, CliError> {
        let parent = match destination.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let dir = tempfile::Builder::new()
            .prefix(".flor-")
            .tempdir_in(&parent)
            .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    /// Scratch path standing in for `target`.
    pub fn path(&mut self, target: &Path) -> PathBuf {
        let name = target.file_name().map(|n| n.to_owned()).unwrap_or_else(|| "out".into());
        let tmp = self
            .dir
            .path()
            .join(format!("{}-{}", self.files.len(), name.to_string_lossy()));
        self.files.push((tmp.clone(), target.to_path_buf()));
        tmp
    }

    pub fn write(&mut self, target: &Path, contents: &str) -> Result<(), CliError> {
        let tmp = self.path(target);
        fs::write(&tmp, contents).map_err(|e| CliError::Io(format!("{}: {e}", target.display())))
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut written = Vec::new();
        for (tmp, target) in &self.files {
            let sidecar = raw_sidecar_path(tmp);
            if tmp.extension().is_some_and(|e| e == "raw") && sidecar.exists() {
                let dest = raw_sidecar_path(target);
                fs::rename(&sidecar, &dest).map_err(|e| CliError::Io(format!("{}: {e}", dest.display())))?;
            }
            fs::rename(tmp, target).map_err(|e| CliError::Io(format!("{}: {e}", target.display())))?;
            written.push(target.clone());
        }
        Ok(written)
    }
}
