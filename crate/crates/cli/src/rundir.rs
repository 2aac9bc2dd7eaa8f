//! One output directory per invocation, removed again unless the command
//! finishes successfully.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;

pub struct RunDir {
    path: PathBuf,
    committed: bool,
}

impl RunDir {
    /// Creates `<root>/<timestamp>-<command>-<config digest>` and writes the
    /// resolved configuration into it.
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{stamp}-{command}-{}", config.digest()?);
        fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
        let mut path = root.join(&base);
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{base}-{n}"));
            n += 1;
        }
        fs::create_dir(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let dir = Self { path, committed: false };
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Keeps the directory and returns its path.
    pub fn commit(mut self) -> PathBuf {
        self.committed = true;
        self.path.clone()
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}
