//! Output directories: the lock file and the resolved configuration.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn claim(path: &Path) -> CliResult<Self> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path: path.to_path_buf(), lock })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn create(&self, name: &str) -> CliResult<std::io::BufWriter<File>> {
        Ok(std::io::BufWriter::new(File::create(self.file(name))?))
    }

    /// Previously written resolved configuration, if any.
    pub fn previous_config(&self) -> Option<String> {
        fs::read_to_string(self.file(RESOLVED_CONFIG_FILE)).ok()
    }

    pub fn write_config(&self, cfg: &RunConfig) -> CliResult<()> {
        fs::write(self.file(RESOLVED_CONFIG_FILE), cfg.resolved_toml()?)?;
        Ok(())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
