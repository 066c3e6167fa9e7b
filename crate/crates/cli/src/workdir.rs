//! Workdir layout and the single-writer lock.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind as IoKind, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

const LOCK: &str = ".lock";

/// `model/`, `adapter/`, `logs/`, `search/`, `reports/` under one root.
#[derive(Debug)]
pub struct Workdir {
    root: PathBuf,
}

/// Held while a command writes; the lockfile is removed on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn adapter(&self) -> PathBuf {
        self.root.join("adapter")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn search(&self) -> PathBuf {
        self.root.join("search")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Creates the layout and takes the lock.
    pub fn lock(&self) -> CliResult<WorkdirLock> {
        for d in [self.model(), self.adapter(), self.logs(), self.search(), self.reports()] {
            fs::create_dir_all(&d)
                .map_err(|e| CliError::artifact(format!("cannot create {}: {e}", d.display())))?;
        }
        let path = self.root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == IoKind::AlreadyExists => Err(CliError::artifact(format!(
                "workdir {} is locked by another run (remove {} if stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::artifact(format!("cannot lock {}: {e}", path.display()))),
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json(&self, path: &Path, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::artifact(format!("cannot serialize {}: {e}", path.display())))?;
        text.push('\n');
        self.write_text(path, &text)
    }

    pub fn write_text(&self, path: &Path, text: &str) -> CliResult<()> {
        fs::write(path, text)
            .map_err(|e| CliError::artifact(format!("cannot write {}: {e}", path.display())))
    }

    pub fn read_json<T: for<'de> serde::Deserialize<'de>>(&self, path: &Path) -> CliResult<T> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::artifact(format!("missing artifact {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::artifact(format!("corrupt artifact {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_first_drops() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path().join("w"));
        let l = wd.lock().unwrap();
        assert!(wd.model().is_dir() && wd.reports().is_dir());
        let e = wd.lock().unwrap_err();
        assert_eq!(e.exit_code(), 3);
        drop(l);
        wd.lock().unwrap();
    }
}
