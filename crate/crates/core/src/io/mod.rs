//! Files: images, datasets, checkpoints, bags and the metrics log.

pub mod bagfile;
pub mod checkpoint;
pub mod dataset;
pub mod image;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Appends one JSON object per line.
pub struct JsonlLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        Ok(JsonlLog { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::file(path, e))?;
        Ok(JsonlLog { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    /// Writes and flushes one record.
    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::file(&self.path, e))?;
        self.out.write_all(b"\n").and_then(|_| self.out.flush()).map_err(|e| Error::file(&self.path, e))
    }
}
