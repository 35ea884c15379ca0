//! Artifact files and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Writes artifacts into one directory and remembers their names for the
/// manifest.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io(format!("{}: {}", path.display(), e.to_string()))
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        for row in rows {
            w.serialize(row).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<V: Serialize + ?Sized>(&mut self, name: &str, value: &V) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.text(name, &text)
    }

    pub fn text(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub train_subset: u64,
    pub test_subset: u64,
    pub tau1_shuffle: Option<u64>,
    pub order_p: Option<u64>,
    pub order_q: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
    pub diverged: bool,
    pub artifacts: Vec<String>,
}
